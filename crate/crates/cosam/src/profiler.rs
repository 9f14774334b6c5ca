//! Analytic parameter and FLOP accounting for the co-segmentation module and
//! for non-local blocks at the same insertion geometry.
//!
//! Conventions: a multiply-accumulate counts as 2 FLOPs. Block FLOPs cover
//! the dense projections (for non-local blocks, the four 1x1 convs over all
//! N*H*W positions); convs carry no bias and the block output is batch
//! normalized, which is the usual non-local configuration.

use serde::Serialize;

use crate::error::{CosamError, Result};

/// Insertion-site geometry: `n` frames of `d`-channel `h x w` feature maps.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Geometry {
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.h == 0 || self.w == 0 {
            return Err(CosamError::arg("geometry dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

/// Parameter and FLOP count for one co-segmentation module.
/// `d_r` is the matching width, `k` the reference-frame count, `hidden` the
/// channel-MLP width.
pub fn count_cosam(geom: Geometry, d_r: usize, k: usize, hidden: usize) -> Result<Cost> {
    geom.validate()?;
    if d_r == 0 || k == 0 || hidden == 0 {
        return Err(CosamError::arg("d_r, k and hidden must be positive"));
    }
    let (n, d, h, w) = (geom.n as u64, geom.d as u64, geom.h as u64, geom.w as u64);
    let (d_r, k, hidden) = (d_r as u64, k as u64, hidden as u64);
    let hw = h * w;

    let p_reduce = d * d_r + d_r;
    let p_bn = 2 * d_r;
    let p_summary = k * hw + 1;
    let p_mlp = (d * hidden + hidden) + (hidden * d + d);
    let params = p_reduce + p_bn + p_summary + p_mlp;

    // Dense multiply-accumulates.
    let m_reduce = n * hw * d * d_r;
    let m_ncc = n * hw * (k * hw) * d_r; // correlation dot products
    let m_summary = n * hw * (k * hw);
    let m_mlp = n * (d * hidden + hidden * d);
    // Elementwise work: descriptor statistics, the two gates, global pooling.
    let extras = 3 * n * hw * d_r + 3 * n * d * hw + n * hw;
    let flops = 2 * (m_reduce + m_ncc + m_summary + m_mlp) + extras;

    Ok(Cost { params, flops })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NlmVariant {
    Gaussian,
    EmbeddedGaussian,
    DotProduct,
    Concatenation,
}

/// Parameter and FLOP count for a non-local block at the same site. The
/// bottleneck width is `d/2`.
pub fn count_nlm(geom: Geometry, variant: NlmVariant) -> Result<Cost> {
    geom.validate()?;
    if geom.d < 2 {
        return Err(CosamError::arg("non-local block needs at least 2 channels"));
    }
    let (n, d, h, w) = (geom.n as u64, geom.d as u64, geom.h as u64, geom.w as u64);
    let s = n * h * w;
    let db = d / 2;
    let proj = d * db; // one 1x1 conv, no bias
    let bn = 2 * d; // output batch norm

    let (params, projections) = match variant {
        // theta, phi, g and the output projection
        NlmVariant::EmbeddedGaussian | NlmVariant::DotProduct => (4 * proj + bn, 4),
        // affinity comes from the raw features; only g and the output
        NlmVariant::Gaussian => (2 * proj + bn, 2),
        // theta, phi, g, output, plus the concatenation scoring vector
        NlmVariant::Concatenation => (4 * proj + (2 * db + 1) + bn, 4),
    };
    Ok(Cost {
        params,
        flops: 2 * projections * s * d * db,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub geometry: Geometry,
    pub cosam: Cost,
    pub nlm: Cost,
    pub nlm_variant: NlmVariant,
    pub param_ratio: f64,
    pub flop_ratio: f64,
}

pub fn compare(
    geom: Geometry,
    d_r: usize,
    k: usize,
    hidden: usize,
    variant: NlmVariant,
) -> Result<Comparison> {
    let cosam = count_cosam(geom, d_r, k, hidden)?;
    let nlm = count_nlm(geom, variant)?;
    Ok(Comparison {
        geometry: geom,
        cosam,
        nlm,
        nlm_variant: variant,
        param_ratio: nlm.params as f64 / cosam.params as f64,
        flop_ratio: nlm.flops as f64 / cosam.flops as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site() -> Geometry {
        Geometry {
            n: 4,
            d: 2048,
            h: 16,
            w: 8,
        }
    }

    #[test]
    fn cosam_param_count_exact() {
        let c = count_cosam(site(), 256, 3, 256).unwrap();
        assert_eq!(c.params, 1_576_321);
        assert!((c.params as f64 - 1.6e6).abs() / 1.6e6 < 0.03);
    }

    #[test]
    fn cosam_flops_in_band() {
        let c = count_cosam(site(), 256, 3, 256).unwrap();
        let rel = (c.flops as f64 - 0.57e9) / 0.57e9;
        assert!(rel.abs() < 0.25, "flops {} off by {rel}", c.flops);
    }

    #[test]
    fn nlm_embedded_gaussian_reference_values() {
        let c = count_nlm(site(), NlmVariant::EmbeddedGaussian).unwrap();
        assert_eq!(c.params, 8_392_704);
        assert!((c.params as f64 - 8.39e6).abs() / 8.39e6 < 0.02);
        assert_eq!(c.flops, 8_589_934_592);
        assert!((c.flops as f64 - 8.59e9).abs() / 8.59e9 < 0.02);
    }

    #[test]
    fn nlm_variants_ordering() {
        let eg = count_nlm(site(), NlmVariant::EmbeddedGaussian).unwrap();
        let dp = count_nlm(site(), NlmVariant::DotProduct).unwrap();
        let ga = count_nlm(site(), NlmVariant::Gaussian).unwrap();
        let cc = count_nlm(site(), NlmVariant::Concatenation).unwrap();
        assert_eq!(eg.params, dp.params);
        assert_eq!(eg.flops, dp.flops);
        assert_eq!(ga.params, 2 * 2048 * 1024 + 2 * 2048);
        assert_eq!(ga.flops, eg.flops / 2);
        assert_eq!(cc.params, eg.params + 2 * 1024 + 1);
    }

    #[test]
    fn ratios_meet_floor() {
        let cmp = compare(site(), 256, 3, 256, NlmVariant::EmbeddedGaussian).unwrap();
        assert!(cmp.param_ratio >= 4.0, "{}", cmp.param_ratio);
        assert!(cmp.flop_ratio >= 10.0, "{}", cmp.flop_ratio);
    }

    #[test]
    fn formula_matches_constructed_module() {
        use crate::cosam::{Cosam, CosamConfig};
        use crate::layers::ParamGroup;
        use crate::rng::rng_from_seed;
        let mut rng = rng_from_seed(0);
        let cfg = CosamConfig {
            d_r: 4,
            k: 2,
            mlp_hidden: Some(6),
            ..CosamConfig::default()
        };
        let module = Cosam::new("m", 12, 5, 3, &cfg, &mut rng).unwrap();
        let g = Geometry {
            n: 3,
            d: 12,
            h: 5,
            w: 3,
        };
        let c = count_cosam(g, 4, 2, 6).unwrap();
        assert_eq!(module.num_trainable() as u64, c.params);
    }

    #[test]
    fn costs_grow_with_width() {
        let base = count_cosam(site(), 128, 3, 256).unwrap();
        let wider = count_cosam(site(), 256, 3, 256).unwrap();
        assert!(wider.params > base.params && wider.flops > base.flops);

        let small = count_nlm(
            Geometry {
                d: 1024,
                ..site()
            },
            NlmVariant::EmbeddedGaussian,
        )
        .unwrap();
        let big = count_nlm(site(), NlmVariant::EmbeddedGaussian).unwrap();
        assert!(big.params > small.params && big.flops > small.flops);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let mut g = site();
        g.n = 0;
        assert!(count_cosam(g, 256, 3, 256).is_err());
        assert!(count_nlm(g, NlmVariant::Gaussian).is_err());
        assert!(count_cosam(site(), 0, 3, 256).is_err());
    }
}
