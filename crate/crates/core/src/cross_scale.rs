//! Max-pool pyramids and regression over every ordered pair of unequal
//! pyramid levels.

use std::collections::BTreeMap;

use crate::correlation::{fsc_regress, FscHead, HeadSpec, HeadVariant};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Params};
use crate::tensor::Var;

/// Largest supported number of pooling steps.
pub const MAX_LEVELS: usize = 4;

/// Feature pyramid: level `i` is level `i - 1` max-pooled by 2.
pub struct Pyramid {
    levels: Vec<Var>,
}

impl Pyramid {
    pub fn levels(&self) -> &[Var] {
        &self.levels
    }

    /// Number of pooling steps (one less than the level count).
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }
}

/// Extent of level `i` for an `h x w` base under ceil-mode pooling.
pub fn level_extent(h: usize, w: usize, i: usize) -> (usize, usize) {
    (0..i).fold((h, w), |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
}

pub fn build_pyramid(f: &Var, n: usize) -> Result<Pyramid> {
    let s = f.shape();
    if s.len() != 3 {
        return shape_err("build_pyramid", format!("expected [c,h,w], got {s:?}"));
    }
    if n > MAX_LEVELS {
        return Err(Error::Invalid(format!("pyramid depth {n} exceeds {MAX_LEVELS}")));
    }
    if s[1] < 1 << n || s[2] < 1 << n {
        return Err(Error::Invalid(format!("{}x{} map too small for {n} pooling steps", s[1], s[2])));
    }
    let mut levels = vec![f.clone()];
    for _ in 0..n {
        let next = levels.last().unwrap().maxpool2d()?;
        levels.push(next);
    }
    Ok(Pyramid { levels })
}

/// Ordered pairs `(m, n)`, `m != n`, over `0..=n_levels`, in lexicographic order.
pub fn enumerate_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..=n)
        .flat_map(|m| (0..=n).filter(move |&k| k != m).map(move |k| (m, k)))
        .collect()
}

/// One independent head per ordered level pair.
pub struct PairHeads {
    depth: usize,
    heads: BTreeMap<(usize, usize), FscHead>,
}

impl PairHeads {
    /// Registers heads named `{prefix}.{m}_{n}` for an `h x w` base map.
    pub fn register(
        params: &mut Params,
        seed: u64,
        prefix: &str,
        depth: usize,
        h: usize,
        w: usize,
        base: HeadSpec,
    ) -> Result<Self> {
        let mut heads = BTreeMap::new();
        for (m, n) in enumerate_pairs(depth) {
            let (h1, w1) = level_extent(h, w, m);
            let (h2, w2) = level_extent(h, w, n);
            let spec = HeadSpec {
                variant: HeadVariant::Fsc,
                h1,
                w1,
                h2,
                w2,
                ..base
            };
            heads.insert((m, n), FscHead::register(params, seed, &format!("{prefix}.{m}_{n}"), spec)?);
        }
        Ok(Self { depth, heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn get(&self, pair: (usize, usize)) -> Option<&FscHead> {
        self.heads.get(&pair)
    }
}

/// Sum of pair-head regressions in lexicographic pair order, reshaped to
/// `[rows, cols, 2]`. An empty pair set yields zeros.
pub fn cross_scale_offsets(
    p: &Bound,
    pyr_ref: &Pyramid,
    pyr_tar: &Pyramid,
    heads: &PairHeads,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    if pyr_ref.depth() != pyr_tar.depth() || pyr_ref.depth() != heads.depth {
        return Err(Error::Invalid(format!(
            "pyramid depths {} / {} vs heads {}",
            pyr_ref.depth(),
            pyr_tar.depth(),
            heads.depth
        )));
    }
    let pairs = enumerate_pairs(heads.depth);
    if pairs.is_empty() {
        let tape = pyr_ref.levels[0].tape();
        return Ok(tape.constant(crate::tensor::NdArray::zeros(&[rows, cols, 2])));
    }
    let mut outs = Vec::with_capacity(pairs.len());
    for (m, n) in pairs {
        let head = heads
            .get((m, n))
            .ok_or_else(|| Error::Invalid(format!("missing head for pair ({m}, {n})")))?;
        let o = fsc_regress(p, &pyr_ref.levels[m], &pyr_tar.levels[n], head)?;
        outs.push(o.reshape(&[rows, cols, 2])?);
    }
    Var::add_n(&outs)
}

/// `O_l = O_l^intra + O_l^cross`.
pub fn combine_local(intra: &Var, cross: &Var) -> Result<Var> {
    intra.add(cross)
}
