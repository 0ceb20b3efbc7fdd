//! Frozen priors: the frame denoiser `D`, the flow estimator `E`, residual
//! joint inputs and flow pyramids.

pub mod denoiser;
pub mod flow_est;

use sha2::{Digest, Sha256};

pub use denoiser::{
    train_learned_denoiser, Denoiser, GaussianSmoother, LearnedArch, LearnedDenoiser, PriorTrainConfig, PriorTrainReport,
};
pub use flow_est::{BlockMatcher, FlowEstimator};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::video::Frame;

/// Baseline `x̂ = D(y)` and residual `r = y - x̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointInput {
    pub baseline: Frame,
    pub residual: Frame,
}

impl JointInput {
    /// Channel concatenation `z = cat(x̂, r)`.
    pub fn concat(&self) -> Frame {
        let (c, h, w) = self.baseline.dims();
        let mut data = Vec::with_capacity(2 * c * h * w);
        data.extend_from_slice(self.baseline.data());
        data.extend_from_slice(self.residual.data());
        Frame::new(2 * c, h, w, data).expect("matching dims")
    }

    pub fn split(z: &Frame) -> Result<Self> {
        let (c2, h, w) = z.dims();
        if c2 % 2 != 0 {
            return Err(Error::Input(format!("joint input needs an even channel count, got {c2}")));
        }
        let n = c2 / 2 * h * w;
        Ok(Self {
            baseline: Frame::new(c2 / 2, h, w, z.data()[..n].to_vec())?,
            residual: Frame::new(c2 / 2, h, w, z.data()[n..].to_vec())?,
        })
    }

    /// `x̂ + r`, the source frame up to rounding.
    pub fn source(&self) -> Frame {
        self.baseline.add(&self.residual).expect("matching dims")
    }
}

pub fn make_joint_input(y: &Frame, d: &Denoiser) -> Result<JointInput> {
    let baseline = d.denoise(y)?;
    let residual = y.sub(&baseline)?;
    Ok(JointInput { baseline, residual })
}

/// Level 0 is `v`; each further level is the 2x2 average of the previous one
/// divided by 2.
pub fn build_flow_pyramid(v: &FlowField, levels: usize) -> Result<Vec<FlowField>> {
    if levels == 0 {
        return Err(Error::Config("flow pyramid needs at least one level".into()));
    }
    let div = 1usize << (levels - 1);
    let (h, w) = (v.height(), v.width());
    if h % div != 0 || w % div != 0 {
        return Err(Error::Config(format!("{h}x{w} flow is not divisible by 2^{} for {levels} levels", levels - 1)));
    }
    let mut out = vec![v.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        let (ph, pw) = (prev.height(), prev.width());
        let mut next = FlowField::zeros(ph / 2, pw / 2);
        for y in 0..ph / 2 {
            for x in 0..pw / 2 {
                let mut acc = (0.0f32, 0.0f32);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (a, b) = prev.at(2 * y + dy, 2 * x + dx);
                    acc.0 += a;
                    acc.1 += b;
                }
                next.set(y, x, (acc.0 * 0.125, acc.1 * 0.125));
            }
        }
        out.push(next);
    }
    Ok(out)
}

/// The frozen `(D, E)` pair shared by both stages and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub denoiser: Denoiser,
    pub flow: FlowEstimator,
}

impl Priors {
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.denoiser.checksum().as_bytes());
        h.update(self.flow.tag().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn tag(&self) -> String {
        format!("{} + {}", self.denoiser.tag(), self.flow.tag())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(c: usize, h: usize, w: usize, seed: u32) -> Frame {
        Frame::new(
            c,
            h,
            w,
            (0..c * h * w).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 999.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_denoiser_gives_zero_residual() {
        let y = frame(3, 5, 4, 1);
        let j = make_joint_input(&y, &Denoiser::Identity).unwrap();
        assert!(j.residual.data().iter().all(|&v| v == 0.0));
        assert_eq!(j.baseline, y);
    }

    #[test]
    fn residual_is_high_pass_of_smoother() {
        let g = GaussianSmoother::new(1.1).unwrap();
        let y = frame(2, 9, 8, 7);
        let j = make_joint_input(&y, &Denoiser::Classical(g.clone())).unwrap();
        let smooth = g.apply(&y);
        for i in 0..y.data().len() {
            let oracle = y.data()[i] as f64 - smooth.data()[i] as f64;
            assert!((j.residual.data()[i] as f64 - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_split_is_lossless() {
        let y = frame(3, 4, 6, 3);
        let j = make_joint_input(&y, &Denoiser::Classical(GaussianSmoother::new(0.9).unwrap())).unwrap();
        let z = j.concat();
        assert_eq!(z.channels(), 6);
        assert_eq!(JointInput::split(&z).unwrap(), j);
    }

    #[test]
    fn uniform_flow_halves_per_level() {
        let p = build_flow_pyramid(&FlowField::uniform(16, 16, 8.0, 0.0), 4).unwrap();
        let dims: Vec<_> = p.iter().map(|f| (f.height(), f.width())).collect();
        assert_eq!(dims, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        for (l, f) in p.iter().enumerate() {
            let want = 8.0 / (1 << l) as f32;
            assert!(f.dx().iter().all(|&v| v == want) && f.dy().iter().all(|&v| v == 0.0));
        }
        assert!(build_flow_pyramid(&FlowField::zeros(8, 8), 4).unwrap().iter().all(FlowField::is_zero));
        assert!(matches!(build_flow_pyramid(&FlowField::zeros(12, 8), 4), Err(Error::Config(_))));
    }

    fn random_flow(h: usize, w: usize, vals: &[f32]) -> FlowField {
        let mut f = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * (y * w + x);
                f.set(y, x, (vals[i % vals.len()], vals[(i + 1) % vals.len()]));
            }
        }
        f
    }

    proptest! {
        #[test]
        fn joint_input_reconstructs_within_one_ulp(vals in prop::collection::vec(-0.5f32..1.5, 48), s in 0.5f64..2.5) {
            let y = Frame::new(3, 4, 4, vals).unwrap();
            let j = make_joint_input(&y, &Denoiser::Classical(GaussianSmoother::new(s).unwrap())).unwrap();
            let src = j.source();
            for i in 0..src.data().len() {
                // One ulp at the magnitude of the largest operand.
                let (b, r, t) = (j.baseline.data()[i], j.residual.data()[i], y.data()[i]);
                let ulp = f32::EPSILON * b.abs().max(r.abs()).max(t.abs()).max(f32::MIN_POSITIVE);
                prop_assert!((src.data()[i] - t).abs() <= ulp);
            }
        }

        #[test]
        fn pyramid_matches_pool_oracle_and_telescopes(vals in prop::collection::vec(-6.0f32..6.0, 16..64)) {
            let v = random_flow(16, 8, &vals);
            let p = build_flow_pyramid(&v, 4).unwrap();
            for l in 1..4 {
                let (prev, cur) = (&p[l - 1], &p[l]);
                for y in 0..cur.height() {
                    for x in 0..cur.width() {
                        let mut o = (0.0f64, 0.0f64);
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let (a, b) = prev.at(2 * y + dy, 2 * x + dx);
                            o.0 += a as f64 / 8.0;
                            o.1 += b as f64 / 8.0;
                        }
                        let (a, b) = cur.at(y, x);
                        prop_assert!((a as f64 - o.0).abs() < 1e-5 && (b as f64 - o.1).abs() < 1e-5);
                    }
                }
            }
            let tail = build_flow_pyramid(&p[1], 3).unwrap();
            prop_assert_eq!(&tail[..], &p[1..]);
        }
    }
}
