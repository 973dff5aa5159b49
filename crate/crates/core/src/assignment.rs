//! k-step target assignment: free-running prefix prediction, the matching
//! cost between slots and targets, and optimal (Hungarian) matching with an
//! exhaustive oracle.

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, NULL, PAD};
use crate::error::{Error, Result};
use crate::model::{Group, Model, SlotState};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetOrigin {
    GroundTruth,
    Keyword,
    Null,
}

/// One entry of a target list: token ids without the trailing EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Target {
    pub tokens: Vec<usize>,
    pub origin: TargetOrigin,
}

impl Target {
    pub fn null() -> Self {
        Target {
            tokens: vec![NULL],
            origin: TargetOrigin::Null,
        }
    }

    pub fn new(tokens: Vec<usize>, origin: TargetOrigin) -> Self {
        Target { tokens, origin }
    }

    pub fn is_null(&self) -> bool {
        self.origin == TargetOrigin::Null
    }
}

/// Targets for the present and the absent slot groups, `N/2` each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetList {
    pub present: Vec<Target>,
    pub absent: Vec<Target>,
}

impl TargetList {
    pub fn describe(&self, vocab: &Vocab) -> Vec<String> {
        self.present
            .iter()
            .chain(&self.absent)
            .map(|t| vocab.tokens_of(&t.tokens).join(" "))
            .collect()
    }
}

/// Greedy free-running decoding of `k` steps for every slot; returns the
/// slot states holding `p^1 .. p^k` and the argmax prefixes.
pub fn k_step_predict(model: &Model, h_e: &Tensor, keywords: &[Vec<usize>], k: usize) -> Result<Vec<SlotState>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let n = model.config.n_slots;
    if keywords.len() != n {
        return Err(Error::invalid(format!("{} keyword entries for {n} slots", keywords.len())));
    }
    let mut slots: Vec<SlotState> = (0..n)
        .map(|i| SlotState {
            slot: i,
            group: if i < n / 2 { Group::Present } else { Group::Absent },
            keyword: None,
            keyword_ids: keywords[i].clone(),
            prefix: vec![PAD],
            dists: Vec::new(),
        })
        .collect();
    for t in 1..=k.min(model.config.max_kp_len) {
        let dists = model.decode_step(h_e, &slots, t)?;
        for (s, p) in slots.iter_mut().zip(dists) {
            s.prefix.push(argmax(&p));
            s.dists.push(p);
        }
    }
    Ok(slots)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// `cost[n][j] = -sum_{t < min(k, |T_j|)} [T_j^t != null] * p^t_n(T_j^t)`.
///
/// `dists[n][t]` is slot `n`'s distribution at step `t + 1`.
pub fn build_cost(targets: &[Target], dists: &[&[Vec<f64>]], k: usize) -> Result<Vec<Vec<f64>>> {
    dists
        .iter()
        .map(|slot| {
            targets
                .iter()
                .map(|target| {
                    let steps = k.min(target.tokens.len());
                    let mut c = 0.0;
                    for (t, &tok) in target.tokens.iter().take(steps).enumerate() {
                        if tok == NULL {
                            continue;
                        }
                        let p = slot
                            .get(t)
                            .ok_or_else(|| Error::invalid(format!("no distribution for step {}", t + 1)))?;
                        let prob = p.get(tok).ok_or(Error::IndexOutOfRange {
                            what: "target token",
                            index: tok,
                            len: p.len(),
                        })?;
                        c -= prob;
                    }
                    Ok(c)
                })
                .collect()
        })
        .collect()
}

fn check_square(cost: &[Vec<f64>]) -> Result<usize> {
    let n = cost.len();
    for row in cost {
        if row.len() != n {
            return Err(Error::invalid(format!("cost matrix is {n}x{}, expected square", row.len())));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
    }
    Ok(n)
}

/// Total cost of `perm`, summed in row order.
pub fn total_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Minimum-cost perfect matching; `result[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = check_square(cost)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    // potentials and matching, 1-based with a sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    Ok(out)
}

/// Exhaustive minimum over all permutations (n <= 8); among equal totals the
/// lexicographically first permutation wins.
pub fn brute_force(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = check_square(cost)?;
    if n > 8 {
        return Err(Error::invalid(format!("brute force limited to n <= 8, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = total_cost(cost, &perm);
    while next_permutation(&mut perm) {
        let c = total_cost(cost, &perm);
        if c < best_cost {
            best_cost = c;
            best = perm.clone();
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Outcome of assigning targets to the slots of both groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Target of every slot, present group first.
    pub slot_targets: Vec<Target>,
    /// `policy[n]` is the index of slot `n`'s target within its group.
    pub present_policy: Vec<usize>,
    pub absent_policy: Vec<usize>,
}

/// Matches each group's targets to that group's slots given the k-step
/// distributions of all slots (`dists[n]` holds `p^1_n .. p^k_n`).
pub fn assign_from_dists(dists: &[Vec<Vec<f64>>], targets: &TargetList, k: usize) -> Result<Assignment> {
    let half = targets.present.len();
    if targets.absent.len() != half || dists.len() != 2 * half {
        return Err(Error::invalid(format!(
            "{} slots for {} present and {} absent targets",
            dists.len(),
            half,
            targets.absent.len()
        )));
    }
    let solve = |group: &[Target], slots: &[Vec<Vec<f64>>]| -> Result<Vec<usize>> {
        let views: Vec<&[Vec<f64>]> = slots.iter().map(Vec::as_slice).collect();
        hungarian(&build_cost(group, &views, k)?)
    };
    let present_policy = solve(&targets.present, &dists[..half])?;
    let absent_policy = solve(&targets.absent, &dists[half..])?;
    let slot_targets = present_policy
        .iter()
        .map(|&j| targets.present[j].clone())
        .chain(absent_policy.iter().map(|&j| targets.absent[j].clone()))
        .collect();
    Ok(Assignment {
        slot_targets,
        present_policy,
        absent_policy,
    })
}

/// k-step prediction followed by per-group matching.
pub fn assign(
    model: &Model,
    h_e: &Tensor,
    keywords: &[Vec<usize>],
    targets: &TargetList,
    k: usize,
) -> Result<Assignment> {
    let slots = k_step_predict(model, h_e, keywords, k)?;
    let dists: Vec<Vec<Vec<f64>>> = slots.into_iter().map(|s| s.dists).collect();
    assign_from_dists(&dists, targets, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hungarian_examples() {
        let c = vec![vec![0.0, -1.0], vec![-1.0, 0.0]];
        let p = hungarian(&c).unwrap();
        assert_eq!(p, vec![1, 0]);
        assert_eq!(total_cost(&c, &p), -2.0);

        let mut d = vec![vec![0.0; 4]; 4];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = -5.0;
        }
        assert_eq!(hungarian(&d).unwrap(), vec![0, 1, 2, 3]);
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
        assert!(hungarian(&[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn brute_force_examples() {
        assert_eq!(brute_force(&[vec![3.0]]).unwrap(), vec![0]);
        assert_eq!(brute_force(&vec![vec![0.5; 3]; 3]).unwrap(), vec![0, 1, 2]);
        assert!(brute_force(&vec![vec![0.0; 9]; 9]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let c: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| -rng.random::<f64>()).collect()).collect();
            let p = brute_force(&c).unwrap();
            assert!(total_cost(&c, &p) <= total_cost(&c, &[0, 1, 2, 3]));
        }
    }

    #[test]
    fn hungarian_matches_oracle_on_seeded_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 2..=6 {
            for _ in 0..200 {
                let c: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..n).map(|_| -2.0 * rng.random::<f64>()).collect())
                    .collect();
                let h = total_cost(&c, &hungarian(&c).unwrap());
                let b = total_cost(&c, &brute_force(&c).unwrap());
                assert_eq!(h, b, "n = {n}");
            }
        }
    }

    fn dist(v: usize, mass: &[(usize, f64)]) -> Vec<f64> {
        let rest = 1.0 - mass.iter().map(|m| m.1).sum::<f64>();
        let free = v - mass.len();
        let mut p = vec![rest / free as f64; v];
        for &(i, m) in mass {
            p[i] = m;
        }
        p
    }

    #[test]
    fn cost_examples() {
        let v = 12;
        let slot = vec![dist(v, &[(8, 0.4)]), dist(v, &[(9, 0.3)]), dist(v, &[(10, 0.2)])];
        let views = [slot.as_slice()];
        assert_eq!(build_cost(&[Target::null()], &views, 2).unwrap(), vec![vec![0.0]]);
        let single = Target::new(vec![8], TargetOrigin::GroundTruth);
        assert_eq!(build_cost(&[single], &views, 2).unwrap(), vec![vec![-0.4]]);
        let three = Target::new(vec![8, 9, 10], TargetOrigin::GroundTruth);
        let k2 = build_cost(&[three.clone()], &views, 2).unwrap()[0][0];
        let k3 = build_cost(&[three], &views, 3).unwrap()[0][0];
        assert_eq!(k2, -0.4 - 0.3);
        assert_eq!(k3, k2 - 0.2);
        let oov = Target::new(vec![99], TargetOrigin::GroundTruth);
        assert!(build_cost(&[oov], &views, 2).is_err());
    }

    #[test]
    fn assignment_prefers_likelier_slot() {
        let v = 10;
        // one slot per group; slot 0 favours token 7, slot 1 does not
        let dists = vec![
            vec![dist(v, &[(7, 0.9)])],
            vec![dist(v, &[(7, 0.2)])],
            vec![dist(v, &[(8, 0.1)])],
            vec![dist(v, &[(8, 0.6)])],
        ];
        let targets = TargetList {
            present: vec![Target::null(), Target::new(vec![7], TargetOrigin::GroundTruth)],
            absent: vec![Target::new(vec![8], TargetOrigin::GroundTruth), Target::null()],
        };
        let a = assign_from_dists(&dists, &targets, 1).unwrap();
        assert_eq!(a.slot_targets[0].tokens, vec![7]);
        assert!(a.slot_targets[1].is_null());
        assert!(a.slot_targets[2].is_null());
        assert_eq!(a.slot_targets[3].tokens, vec![8]);
        // the oracle agrees
        let views: Vec<&[Vec<f64>]> = dists[..2].iter().map(Vec::as_slice).collect();
        let c = build_cost(&targets.present, &views, 1).unwrap();
        assert_eq!(brute_force(&c).unwrap(), a.present_policy);
    }

    fn small_model() -> Model {
        Model::init(
            ModelConfig {
                d: 16,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                vocab_size: 24,
                n_slots: 6,
                n_keywords: 1,
                max_kp_len: 4,
                ffn_width: 16,
                rpe_buckets: 8,
                rpe_max_distance: 16,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn k_step_prediction_shape_determinism_and_dependence() {
        let m = small_model();
        let h = m.encode(&[7, 8, 9]).unwrap();
        let kw = vec![vec![10], vec![], vec![], vec![10], vec![], vec![]];
        let one = k_step_predict(&m, &h, &kw, 1).unwrap();
        assert_eq!(one.len(), 6);
        assert!(one.iter().all(|s| s.dists.len() == 1));
        let a = k_step_predict(&m, &h, &kw, 2).unwrap();
        let b = k_step_predict(&m, &h, &kw, 2).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!(s.prefix[1], argmax(&s.dists[0]));
        }
        // step-2 distribution reacts to an intervened first token
        let mut forced = a.clone();
        for s in &mut forced {
            s.prefix[1] = if s.prefix[1] == 11 { 12 } else { 11 };
        }
        let p2 = m.decode_step(&h, &forced, 2).unwrap();
        for (s, p) in a.iter().zip(&p2) {
            assert_ne!(&s.dists[1], p);
        }
    }

    #[test]
    fn all_null_targets_assign_null_everywhere() {
        let m = small_model();
        let h = m.encode(&[7, 8]).unwrap();
        let targets = TargetList {
            present: vec![Target::null(); 3],
            absent: vec![Target::null(); 3],
        };
        let a = assign(&m, &h, &vec![vec![]; 6], &targets, 2).unwrap();
        assert!(a.slot_targets.iter().all(Target::is_null));
    }

    #[test]
    fn target_order_does_not_change_outcome() {
        let m = small_model();
        let h = m.encode(&[7, 8, 9, 10]).unwrap();
        let kw = vec![vec![]; 6];
        let targets = TargetList {
            present: vec![
                Target::new(vec![13, 14], TargetOrigin::GroundTruth),
                Target::new(vec![15], TargetOrigin::Keyword),
                Target::null(),
            ],
            absent: vec![
                Target::new(vec![16, 17, 18], TargetOrigin::GroundTruth),
                Target::new(vec![19], TargetOrigin::GroundTruth),
                Target::null(),
            ],
        };
        let base = assign(&m, &h, &kw, &targets, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let mut shuffled = targets.clone();
            shuffled.present.shuffle(&mut rng);
            shuffled.absent.shuffle(&mut rng);
            let other = assign(&m, &h, &kw, &shuffled, 2).unwrap();
            assert_eq!(base.slot_targets, other.slot_targets);
        }
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(n in 1usize..=6, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| -rng.random::<f64>()).collect()).collect();
            let h = hungarian(&c).unwrap();
            let mut seen = h.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(total_cost(&c, &h), total_cost(&c, &brute_force(&c).unwrap()));
        }

        #[test]
        fn costs_lie_in_range(
            k in 1usize..4,
            targets in prop::collection::vec(prop::collection::vec(0usize..8, 1..5), 1..4),
            seed: u64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let slot: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let raw: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|x| x / s).collect()
                })
                .collect();
            let ts: Vec<Target> = targets.into_iter().map(|t| Target::new(t, TargetOrigin::GroundTruth)).collect();
            let c = build_cost(&ts, &[slot.as_slice()], k).unwrap();
            for (j, x) in c[0].iter().enumerate() {
                prop_assert!(*x <= 0.0 && *x >= -(k as f64));
                if ts[j].tokens.iter().all(|&t| t == NULL) {
                    prop_assert_eq!(*x, 0.0);
                }
            }
        }
    }
}
