//! Frozen flow estimators `E`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::video::Frame;

/// Exhaustive integer block matching with parabolic subpixel refinement,
/// run on the channel-mean luminance proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockMatcher {
    /// Search range in pixels along each axis.
    pub radius: usize,
    /// Half-size of the square matching block.
    pub block: usize,
}

impl Default for BlockMatcher {
    fn default() -> Self {
        Self { radius: 8, block: 3 }
    }
}

impl BlockMatcher {
    /// Backward flow: for each `dst` pixel `p`, the displacement `d` minimising
    /// the block SAD between `src(p + d)` and `dst(p)`. Ties go to the smaller
    /// displacement, so identical inputs give a zero field.
    pub fn estimate(&self, src: &Frame, dst: &Frame) -> Result<FlowField> {
        if src.dims() != dst.dims() {
            return Err(Error::Input(format!("flow inputs differ in shape: {:?} vs {:?}", src.dims(), dst.dims())));
        }
        let (a, b) = (src.luminance(), dst.luminance());
        let (_, h, w) = a.dims();
        let r = self.radius as isize;
        let mut disps: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
        disps.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
        let side = 2 * self.radius + 1;
        let mut costs = vec![f64::INFINITY; side * side * h * w];
        let mut best = vec![(f64::INFINITY, 0isize, 0isize); h * w];
        let mut diff = vec![0.0f64; h * w];
        for &(dx, dy) in &disps {
            for y in 0..h {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for x in 0..w {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    diff[y * w + x] = (a.get(0, sy, sx) - b.get(0, y, x)).abs() as f64;
                }
            }
            let sad = box_sum(&diff, h, w, self.block);
            let slot = ((dy + r) as usize * side + (dx + r) as usize) * h * w;
            costs[slot..slot + h * w].copy_from_slice(&sad);
            for (p, &c) in sad.iter().enumerate() {
                if c < best[p].0 {
                    best[p] = (c, dx, dy);
                }
            }
        }
        let mut flow = FlowField::zeros(h, w);
        let cost_at = |p: usize, dx: isize, dy: isize| -> Option<f64> {
            if dx.abs() > r || dy.abs() > r {
                return None;
            }
            Some(costs[((dy + r) as usize * side + (dx + r) as usize) * h * w + p])
        };
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (c0, dx, dy) = best[p];
                let mut fx = dx as f32;
                let mut fy = dy as f32;
                if c0 > 0.0 {
                    fx += parabolic(cost_at(p, dx - 1, dy), c0, cost_at(p, dx + 1, dy));
                    fy += parabolic(cost_at(p, dx, dy - 1), c0, cost_at(p, dx, dy + 1));
                }
                flow.set(y, x, (fx, fy));
            }
        }
        Ok(flow)
    }
}

fn parabolic(lo: Option<f64>, c0: f64, hi: Option<f64>) -> f32 {
    match (lo, hi) {
        (Some(l), Some(u)) => {
            let den = l - 2.0 * c0 + u;
            if den > 0.0 {
                (0.5 * (l - u) / den).clamp(-0.5, 0.5) as f32
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

/// Sum over the `(2b+1)^2` window around each pixel, clipped at the borders.
fn box_sum(v: &[f64], h: usize, w: usize, b: usize) -> Vec<f64> {
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(b), (y + b + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(b), (x + b + 1).min(w));
            out[y * w + x] = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FlowEstimator {
    /// Pass-through of the generator's exact flows.
    GroundTruth,
    BlockMatching(BlockMatcher),
}

impl FlowEstimator {
    /// Flow `src -> dst` between denoised baselines. The ground-truth variant
    /// returns `gt` unchanged and needs it to be present.
    pub fn estimate(&self, src: &Frame, dst: &Frame, gt: Option<&FlowField>) -> Result<FlowField> {
        if src.dims() != dst.dims() {
            return Err(Error::Input(format!("flow inputs differ in shape: {:?} vs {:?}", src.dims(), dst.dims())));
        }
        match self {
            FlowEstimator::GroundTruth => {
                if src == dst {
                    return Ok(FlowField::zeros(src.height(), src.width()));
                }
                let gt = gt.ok_or_else(|| Error::Input("ground-truth flow estimator needs clips with stored flows".into()))?;
                if (gt.height(), gt.width()) != (src.height(), src.width()) {
                    return Err(Error::Input("stored flow does not match the frame size".into()));
                }
                Ok(gt.clone())
            }
            FlowEstimator::BlockMatching(bm) => bm.estimate(src, dst),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            FlowEstimator::GroundTruth => "ground_truth".into(),
            FlowEstimator::BlockMatching(b) => format!("block_matching(radius={},block={})", b.radius, b.block),
        }
    }
}
