//! Block sampling strategies behind a common trait, selected by name.
//!
//! A strategy picks which units (coordinates, or whole groups when the
//! regularizer is grouped) the next outer iteration updates. Strategies are
//! registered under the same names the CLI accepts, so a config string maps
//! straight to a boxed sampler.

use rand::seq::SliceRandom;
use rand::RngCore;
use std::ops::Range;
use thiserror::Error;

use crate::problem::BlockIndexSet;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("unknown strategy {0:?}; known: {known}", known = STRATEGY_NAMES.join(", "))]
    UnknownStrategy(String),
    #[error("block size {size} out of range 1..={units}")]
    SizeOutOfRange { size: usize, units: usize },
    #[error("strategy {0} needs per-unit residual scores")]
    MissingScores(&'static str),
    #[error("score vector has length {got}, expected {expected}")]
    ScoreLength { expected: usize, got: usize },
}

/// What a sampling unit is: single coordinates, or contiguous whole groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitSpace {
    Coordinate { n: usize },
    Group { n: usize, groups: Vec<Range<usize>> },
}

impl UnitSpace {
    pub fn coordinate(n: usize) -> Self {
        UnitSpace::Coordinate { n }
    }

    pub fn group(n: usize, groups: Vec<Range<usize>>) -> Self {
        UnitSpace::Group { n, groups }
    }

    pub fn unit_count(&self) -> usize {
        match self {
            UnitSpace::Coordinate { n } => *n,
            UnitSpace::Group { groups, .. } => groups.len(),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            UnitSpace::Coordinate { n } | UnitSpace::Group { n, .. } => *n,
        }
    }

    /// Expands sorted unit ids into a coordinate index set.
    pub fn expand(&self, unit_ids: &[usize]) -> BlockIndexSet {
        match self {
            UnitSpace::Coordinate { n } => {
                BlockIndexSet::new(unit_ids.to_vec(), *n).expect("sampler produced a valid block")
            }
            UnitSpace::Group { n, groups } => {
                let mut coords = Vec::new();
                for &u in unit_ids {
                    coords.extend(groups[u].clone());
                }
                BlockIndexSet::new(coords, *n).expect("sampler produced a valid block")
            }
        }
    }

    /// Per-unit residual scores: `|G_i|` per coordinate, or the Euclidean norm
    /// of `G` over each group.
    pub fn unit_scores(&self, g_full: &ndarray::ArrayView1<f64>) -> Vec<f64> {
        match self {
            UnitSpace::Coordinate { n } => {
                debug_assert_eq!(g_full.len(), *n);
                g_full.iter().map(|v| v.abs()).collect()
            }
            UnitSpace::Group { groups, .. } => groups
                .iter()
                .map(|g| {
                    g_full
                        .slice(ndarray::s![g.clone()])
                        .mapv(|v| v * v)
                        .sum()
                        .sqrt()
                })
                .collect(),
        }
    }
}

/// Guarantees a strategy offers about its draws: a floor on per-unit inclusion
/// probability, and a deterministic fraction of the residual norm captured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyConstants {
    pub p_min: Option<f64>,
    pub capture: Option<f64>,
}

/// A block sampling strategy. Stateful: cyclic variants carry their cycle
/// position, so one sampler serves one solver run.
pub trait BlockSampler: Send {
    fn name(&self) -> &'static str;

    fn unit_space(&self) -> &UnitSpace;

    /// Units per draw.
    fn block_units(&self) -> usize;

    /// Whether `sample` requires per-unit residual scores.
    fn needs_scores(&self) -> bool {
        false
    }

    fn constants(&self) -> StrategyConstants;

    /// Draws the next block, expanded to coordinate indices.
    fn sample(
        &mut self,
        rng: &mut dyn RngCore,
        scores: Option<&[f64]>,
    ) -> Result<BlockIndexSet, SamplingError>;
}

fn check_size(size: usize, units: usize) -> Result<(), SamplingError> {
    if size < 1 || size > units {
        return Err(SamplingError::SizeOutOfRange { size, units });
    }
    Ok(())
}

/// Every unit, every iteration.
struct Full {
    units: UnitSpace,
}

impl BlockSampler for Full {
    fn name(&self) -> &'static str {
        "full"
    }

    fn unit_space(&self) -> &UnitSpace {
        &self.units
    }

    fn block_units(&self) -> usize {
        self.units.unit_count()
    }

    fn constants(&self) -> StrategyConstants {
        StrategyConstants {
            p_min: Some(1.0),
            capture: Some(1.0),
        }
    }

    fn sample(
        &mut self,
        _rng: &mut dyn RngCore,
        _scores: Option<&[f64]>,
    ) -> Result<BlockIndexSet, SamplingError> {
        let all: Vec<usize> = (0..self.units.unit_count()).collect();
        Ok(self.units.expand(&all))
    }
}

/// `s` units uniformly at random without replacement.
struct UniformRandom {
    units: UnitSpace,
    s: usize,
}

impl BlockSampler for UniformRandom {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn unit_space(&self) -> &UnitSpace {
        &self.units
    }

    fn block_units(&self) -> usize {
        self.s
    }

    fn constants(&self) -> StrategyConstants {
        let u = self.units.unit_count() as f64;
        StrategyConstants {
            p_min: Some(self.s as f64 / u),
            capture: None,
        }
    }

    fn sample(
        &mut self,
        rng: &mut dyn RngCore,
        _scores: Option<&[f64]>,
    ) -> Result<BlockIndexSet, SamplingError> {
        let u = self.units.unit_count();
        let mut ids = rand::seq::index::sample(rng, u, self.s).into_vec();
        ids.sort_unstable();
        Ok(self.units.expand(&ids))
    }
}

/// Contiguous windows of `s` units, visited in a freshly shuffled window order
/// each cycle. The final window is shorter when `s` does not divide the count.
struct CyclicContiguous {
    units: UnitSpace,
    s: usize,
    window_order: Vec<usize>,
    cursor: usize,
}

impl BlockSampler for CyclicContiguous {
    fn name(&self) -> &'static str {
        "cyc-contig"
    }

    fn unit_space(&self) -> &UnitSpace {
        &self.units
    }

    fn block_units(&self) -> usize {
        self.s
    }

    fn constants(&self) -> StrategyConstants {
        StrategyConstants {
            p_min: None,
            capture: None,
        }
    }

    fn sample(
        &mut self,
        rng: &mut dyn RngCore,
        _scores: Option<&[f64]>,
    ) -> Result<BlockIndexSet, SamplingError> {
        let u = self.units.unit_count();
        let windows = u.div_ceil(self.s);
        if self.cursor == 0 {
            self.window_order = (0..windows).collect();
            self.window_order.shuffle(rng);
        }
        let w = self.window_order[self.cursor];
        self.cursor = (self.cursor + 1) % windows;
        let lo = w * self.s;
        let hi = (lo + self.s).min(u);
        let ids: Vec<usize> = (lo..hi).collect();
        Ok(self.units.expand(&ids))
    }
}

/// Successive chunks of `s` units from a per-cycle random permutation.
struct CyclicPermuted {
    units: UnitSpace,
    s: usize,
    perm: Vec<usize>,
    cursor: usize,
}

impl BlockSampler for CyclicPermuted {
    fn name(&self) -> &'static str {
        "cyc-perm"
    }

    fn unit_space(&self) -> &UnitSpace {
        &self.units
    }

    fn block_units(&self) -> usize {
        self.s
    }

    fn constants(&self) -> StrategyConstants {
        StrategyConstants {
            p_min: None,
            capture: None,
        }
    }

    fn sample(
        &mut self,
        rng: &mut dyn RngCore,
        _scores: Option<&[f64]>,
    ) -> Result<BlockIndexSet, SamplingError> {
        let u = self.units.unit_count();
        if self.cursor == 0 {
            self.perm = (0..u).collect();
            self.perm.shuffle(rng);
        }
        let hi = (self.cursor + self.s).min(u);
        let mut ids: Vec<usize> = self.perm[self.cursor..hi].to_vec();
        self.cursor = if hi == u { 0 } else { hi };
        ids.sort_unstable();
        Ok(self.units.expand(&ids))
    }
}

/// The `kk` units with the largest residual scores; ties break toward the
/// lowest index so draws are deterministic given the scores.
struct TopK {
    units: UnitSpace,
    kk: usize,
}

impl BlockSampler for TopK {
    fn name(&self) -> &'static str {
        "topk"
    }

    fn unit_space(&self) -> &UnitSpace {
        &self.units
    }

    fn block_units(&self) -> usize {
        self.kk
    }

    fn needs_scores(&self) -> bool {
        true
    }

    fn constants(&self) -> StrategyConstants {
        let u = self.units.unit_count() as f64;
        StrategyConstants {
            p_min: None,
            capture: Some(self.kk as f64 / u),
        }
    }

    fn sample(
        &mut self,
        _rng: &mut dyn RngCore,
        scores: Option<&[f64]>,
    ) -> Result<BlockIndexSet, SamplingError> {
        let scores = scores.ok_or(SamplingError::MissingScores("topk"))?;
        let u = self.units.unit_count();
        if scores.len() != u {
            return Err(SamplingError::ScoreLength {
                expected: u,
                got: scores.len(),
            });
        }
        let mut ids: Vec<usize> = (0..u).collect();
        ids.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        ids.truncate(self.kk);
        ids.sort_unstable();
        Ok(self.units.expand(&ids))
    }
}

type SamplerCtor = fn(usize, UnitSpace) -> Result<Box<dyn BlockSampler>, SamplingError>;

pub const STRATEGY_NAMES: [&str; 5] = ["full", "uniform", "cyc-contig", "cyc-perm", "topk"];

static REGISTRY: &[(&str, SamplerCtor)] = &[
    ("full", |_size, units| Ok(Box::new(Full { units }))),
    ("uniform", |size, units| {
        check_size(size, units.unit_count())?;
        Ok(Box::new(UniformRandom { units, s: size }))
    }),
    ("cyc-contig", |size, units| {
        check_size(size, units.unit_count())?;
        Ok(Box::new(CyclicContiguous {
            units,
            s: size,
            window_order: Vec::new(),
            cursor: 0,
        }))
    }),
    ("cyc-perm", |size, units| {
        check_size(size, units.unit_count())?;
        Ok(Box::new(CyclicPermuted {
            units,
            s: size,
            perm: Vec::new(),
            cursor: 0,
        }))
    }),
    ("topk", |size, units| {
        check_size(size, units.unit_count())?;
        Ok(Box::new(TopK { units, kk: size }))
    }),
];

/// Looks a strategy up by its registered name and builds it.
///
/// `block_units` counts units per draw (ignored by `"full"`).
pub fn build_sampler(
    name: &str,
    block_units: usize,
    units: UnitSpace,
) -> Result<Box<dyn BlockSampler>, SamplingError> {
    for (key, ctor) in REGISTRY {
        if *key == name {
            return ctor(block_units, units);
        }
    }
    Err(SamplingError::UnknownStrategy(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coord(n: usize) -> UnitSpace {
        UnitSpace::coordinate(n)
    }

    #[test]
    fn registry_knows_all_names_and_rejects_others() {
        for name in STRATEGY_NAMES {
            assert!(build_sampler(name, 2, coord(8)).is_ok(), "{name}");
        }
        assert!(matches!(
            build_sampler("best", 2, coord(8)),
            Err(SamplingError::UnknownStrategy(_))
        ));
        assert!(matches!(
            build_sampler("uniform", 9, coord(8)),
            Err(SamplingError::SizeOutOfRange { .. })
        ));
        assert!(matches!(
            build_sampler("uniform", 0, coord(8)),
            Err(SamplingError::SizeOutOfRange { .. })
        ));
    }

    #[test]
    fn topk_selects_largest_with_low_index_ties() {
        let mut s = build_sampler("topk", 2, coord(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = s.sample(&mut rng, Some(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(b.indices(), &[0, 2]);
        // All-equal scores: lowest indices win.
        let b = s.sample(&mut rng, Some(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(b.indices(), &[0, 1]);
        assert!(matches!(
            s.sample(&mut rng, None),
            Err(SamplingError::MissingScores(_))
        ));
    }

    #[test]
    fn topk_capture_inequality_holds() {
        // ||G_S||^2 >= (kk/n) ||G||^2 for the top-kk block, any scores.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let n = 24;
        let kk = 7;
        let mut s = build_sampler("topk", kk, coord(n)).unwrap();
        for _ in 0..200 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let scores: Vec<f64> = g.iter().map(|v| v.abs()).collect();
            let b = s.sample(&mut rng, Some(&scores)).unwrap();
            let picked: f64 = b.indices().iter().map(|&i| g[i] * g[i]).sum();
            let total: f64 = g.iter().map(|v| v * v).sum();
            assert!(picked >= (kk as f64 / n as f64) * total - 1e-12);
        }
    }

    #[test]
    fn strategy_constants_match_definitions() {
        let s = build_sampler("uniform", 8, coord(64)).unwrap();
        assert_eq!(
            s.constants(),
            StrategyConstants {
                p_min: Some(0.125),
                capture: None
            }
        );
        let s = build_sampler("topk", 16, coord(64)).unwrap();
        assert_eq!(
            s.constants(),
            StrategyConstants {
                p_min: None,
                capture: Some(0.25)
            }
        );
        let s = build_sampler("full", 1, coord(64)).unwrap();
        assert_eq!(
            s.constants(),
            StrategyConstants {
                p_min: Some(1.0),
                capture: Some(1.0)
            }
        );
        assert_eq!(s.block_units(), 64);
    }

    #[test]
    fn uniform_inclusion_frequency_within_five_se() {
        let n = 64;
        let s_units = 8;
        let draws = 10_000;
        let mut counts = vec![0usize; n];
        let mut sampler = build_sampler("uniform", s_units, coord(n)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..draws {
            let b = sampler.sample(&mut rng, None).unwrap();
            assert_eq!(b.len(), s_units);
            for &i in b.indices() {
                counts[i] += 1;
            }
        }
        let p = s_units as f64 / n as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - p).abs() <= 5.0 * se, "freq {freq} vs p {p}");
        }
    }

    #[test]
    fn cyclic_variants_cover_every_unit_each_cycle() {
        for name in ["cyc-contig", "cyc-perm"] {
            // 10 units, windows of 4: cycle length 3 with a short tail draw.
            let mut sampler = build_sampler(name, 4, coord(10)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for cycle in 0..6 {
                let mut seen = [false; 10];
                let mut total = 0;
                for _ in 0..3 {
                    let b = sampler.sample(&mut rng, None).unwrap();
                    total += b.len();
                    for &i in b.indices() {
                        assert!(!seen[i], "{name} repeated unit {i} in cycle {cycle}");
                        seen[i] = true;
                    }
                }
                assert_eq!(total, 10);
                assert!(seen.iter().all(|&v| v));
            }
        }
    }

    #[test]
    fn cyclic_orders_reshuffle_between_cycles() {
        // With a fresh permutation each cycle, 6 cycles almost surely differ.
        let mut sampler = build_sampler("cyc-perm", 3, coord(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cycles = Vec::new();
        for _ in 0..6 {
            let mut order = Vec::new();
            for _ in 0..3 {
                order.extend(sampler.sample(&mut rng, None).unwrap().indices().to_vec());
            }
            cycles.push(order);
        }
        assert!(cycles.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn same_seed_gives_identical_draws() {
        for name in STRATEGY_NAMES {
            let scores: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin().abs()).collect();
            let mut a = build_sampler(name, 3, coord(12)).unwrap();
            let mut b = build_sampler(name, 3, coord(12)).unwrap();
            let mut ra = ChaCha8Rng::seed_from_u64(99);
            let mut rb = ChaCha8Rng::seed_from_u64(99);
            for _ in 0..20 {
                let xa = a.sample(&mut ra, Some(&scores)).unwrap();
                let xb = b.sample(&mut rb, Some(&scores)).unwrap();
                assert_eq!(xa.indices(), xb.indices(), "{name}");
            }
        }
    }

    #[test]
    fn group_units_expand_to_whole_groups() {
        let groups = vec![0..5, 5..10, 10..12];
        let units = UnitSpace::group(12, groups);
        let mut sampler = build_sampler("topk", 1, units).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Residual living on the middle group.
        let mut g = ndarray::Array1::zeros(12);
        g[6] = 2.0;
        let scores = sampler.unit_space().unit_scores(&g.view());
        assert_eq!(scores, vec![0.0, 2.0, 0.0]);
        let b = sampler.sample(&mut rng, Some(&scores)).unwrap();
        assert_eq!(b.indices(), &[5, 6, 7, 8, 9]);
    }
}
