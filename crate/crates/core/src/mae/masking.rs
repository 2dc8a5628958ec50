//! Mask plans and the three samplers (random, block-wise, grid-wise).

use rand::Rng;

use crate::error::{Error, Result};

/// Which patches an image keeps, as a permutation whose first `len_keep`
/// entries are the visible patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub len_keep: usize,
    pub ids_shuffle: Vec<usize>,
    pub ids_restore: Vec<usize>,
    /// 1 = masked, 0 = visible.
    pub mask: Vec<u8>,
}

impl MaskPlan {
    pub fn from_shuffle(ids_shuffle: Vec<usize>, len_keep: usize) -> Result<Self> {
        let n = ids_shuffle.len();
        if len_keep > n {
            return Err(Error::invalid(format!("len_keep {len_keep} exceeds {n} patches")));
        }
        let mut ids_restore = vec![usize::MAX; n];
        for (i, &j) in ids_shuffle.iter().enumerate() {
            if j >= n || ids_restore[j] != usize::MAX {
                return Err(Error::invalid(format!("{ids_shuffle:?} is not a permutation")));
            }
            ids_restore[j] = i;
        }
        let mask = ids_restore.iter().map(|&i| u8::from(i >= len_keep)).collect();
        Ok(Self {
            n,
            len_keep,
            ids_shuffle,
            ids_restore,
            mask,
        })
    }

    /// Plan that keeps every patch.
    pub fn keep_all(n: usize) -> Self {
        Self::from_shuffle((0..n).collect(), n).expect("identity permutation")
    }

    pub fn masked_count(&self) -> usize {
        self.n - self.len_keep
    }

    /// Visible patch indices in ascending order.
    pub fn visible_sorted(&self) -> Vec<usize> {
        let mut v = self.ids_shuffle[..self.len_keep].to_vec();
        v.sort_unstable();
        v
    }

    /// Masked patch indices in shuffle order.
    pub fn masked(&self) -> &[usize] {
        &self.ids_shuffle[self.len_keep..]
    }

    /// Moves the last visible entries of the shuffle into the masked group so
    /// that only `len_keep` patches stay visible.
    pub fn truncate_keep(&mut self, len_keep: usize) {
        assert!(len_keep <= self.len_keep);
        for &j in &self.ids_shuffle[len_keep..self.len_keep] {
            self.mask[j] = 1;
        }
        self.len_keep = len_keep;
    }

    /// Checks the permutation/mask invariants.
    pub fn check(&self) -> Result<()> {
        let rebuilt = Self::from_shuffle(self.ids_shuffle.clone(), self.len_keep)?;
        if rebuilt != *self {
            return Err(Error::invalid("mask plan is internally inconsistent"));
        }
        Ok(())
    }
}

/// `floor(n·(1−r))`, at least one.
pub fn len_keep(n: usize, ratio: f64) -> usize {
    // the epsilon absorbs representation error in products such as 64·0.25
    let keep = (n as f64 * (1.0 - ratio) + 1e-9).floor() as usize;
    keep.clamp(1, n)
}

fn check_ratio(ratio: f64, open_below: bool) -> Result<()> {
    let ok = ratio < 1.0 && if open_below { ratio > 0.0 } else { ratio >= 0.0 };
    if !ok {
        return Err(Error::invalid(format!("mask ratio {ratio} is outside the allowed range")));
    }
    Ok(())
}

/// Uniform sampling without replacement: argsort of i.i.d. uniform noise.
pub fn random_mask_plan(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    check_ratio(ratio, false)?;
    if n == 0 {
        return Err(Error::invalid("cannot mask an empty patch set"));
    }
    let noise: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]));
    MaskPlan::from_shuffle(ids, len_keep(n, ratio))
}

/// Keeps the patches at even rows and even columns: exactly one in four.
pub fn grid_mask_plan(grid_side: usize) -> Result<MaskPlan> {
    if grid_side == 0 || grid_side % 2 != 0 {
        return Err(Error::invalid(format!("grid sampling needs an even grid side, got {grid_side}")));
    }
    let (keep, drop): (Vec<usize>, Vec<usize>) =
        (0..grid_side * grid_side).partition(|&j| (j / grid_side) % 2 == 0 && (j % grid_side) % 2 == 0);
    let len_keep = keep.len();
    MaskPlan::from_shuffle(keep.into_iter().chain(drop).collect(), len_keep)
}

/// Axis-aligned patch rectangle, in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row) && (self.left..self.left + self.width).contains(&col)
    }
}

pub const MIN_BLOCK_AREA: usize = 16;
pub const MIN_BLOCK_ASPECT: f64 = 0.3;

pub fn block_mask_plan(grid_side: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    block_mask_plan_traced(grid_side, ratio, rng).map(|(plan, _)| plan)
}

/// Block-wise sampling that also returns the accepted rectangles.
///
/// Blocks of area at least [`MIN_BLOCK_AREA`] (capped at a quarter of the
/// grid and at the target count) with aspect ratio in `[0.3, 1/0.3]` are dropped at random
/// positions until `round(n·r)` patches are masked. A block is accepted only
/// if it masks something new and overshoots the target by at most one grid
/// row.
pub fn block_mask_plan_traced(grid_side: usize, ratio: f64, rng: &mut impl Rng) -> Result<(MaskPlan, Vec<Rect>)> {
    check_ratio(ratio, true)?;
    if grid_side < 2 {
        return Err(Error::invalid("block sampling needs at least a 2x2 grid"));
    }
    let n = grid_side * grid_side;
    // at least one patch stays visible
    let target = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
    // small grids cannot host 16-patch blocks without masking nearly everything
    let min_area = MIN_BLOCK_AREA.min(n / 4).min(target).max(1);
    let log_aspect = MIN_BLOCK_ASPECT.ln()..-MIN_BLOCK_ASPECT.ln();

    let mut mask = vec![0u8; n];
    let mut count = 0;
    let mut rects = Vec::new();
    let mut attempts = 0;
    while count < target {
        if attempts >= 10 * n {
            return Err(Error::invalid(format!(
                "block sampler could not reach {target} masked patches on a {grid_side}x{grid_side} grid"
            )));
        }
        attempts += 1;
        let budget = (target - count + grid_side).min(n - 1 - count);
        let max_area = budget.max(min_area).min(n);
        let area = rng.random_range(min_area as f64..=max_area as f64);
        let aspect = rng.random_range(log_aspect.clone()).exp();
        let height = ((area * aspect).sqrt().round() as usize).clamp(1, grid_side);
        let width = ((area / aspect).sqrt().round() as usize).clamp(1, grid_side);
        let shape_ok = height * width >= min_area
            && (MIN_BLOCK_ASPECT..=1.0 / MIN_BLOCK_ASPECT).contains(&(height as f64 / width as f64));
        if !shape_ok {
            continue;
        }
        let rect = Rect {
            top: rng.random_range(0..=grid_side - height),
            left: rng.random_range(0..=grid_side - width),
            height,
            width,
        };
        let cells = || {
            (rect.top..rect.top + height).flat_map(move |r| (rect.left..rect.left + width).map(move |c| r * grid_side + c))
        };
        let fresh = cells().filter(|&j| mask[j] == 0).count();
        if fresh == 0 || fresh > budget {
            continue;
        }
        for j in cells() {
            mask[j] = 1;
        }
        count += fresh;
        rects.push(rect);
    }

    let (mut visible, mut masked): (Vec<usize>, Vec<usize>) = (0..n).partition(|&j| mask[j] == 0);
    shuffle(&mut visible, rng);
    shuffle(&mut masked, rng);
    let len_keep = visible.len();
    let plan = MaskPlan::from_shuffle(visible.into_iter().chain(masked).collect(), len_keep)?;
    Ok((plan, rects))
}

fn shuffle(v: &mut [usize], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
}
