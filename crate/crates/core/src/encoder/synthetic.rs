//! Seeded synthetic stand-in for a frozen vision-language encoder.
//!
//! Text path: `t = normalize(A · meanpool(P) + B · e_c + b)`.
//! Image path: `μ_c = normalize(B · e_c + b + m + r_c)`, and a sample of
//! class `c` is `normalize(μ_c + σ ξ)` with `ξ ~ N(0, I)`.
//!
//! The global shift `m = s_dom · A z` lies in the range of the prompt map, so a
//! single shared prompt can absorb it. The per-class residual
//! `r_c = s_cls · A z_c` can only be absorbed by a prompt dedicated to class `c`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendKind, ClassCatalog, Dims, Embedding, Encoder, EncoderFingerprint, Sample, TokenMatrix,
    DEFAULT_PROMPT_LEN, TOKEN_SCALE,
};
use crate::error::{CakiError, Result};
use crate::numerics::{dot, norm, Matrix};
use crate::seed;

/// Scale of the frozen text-head bias.
const BIAS_SCALE: f64 = 0.25;
/// Extra gain on the prompt map, so that shifts in its range stand out
/// against the spread of the class tokens.
const PROMPT_GAIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub token_dim: usize,
    pub prompt_len: usize,
    pub sigma: f64,
    pub domain_shift_scale: f64,
    pub class_shift_scale: f64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            seed: 7,
            classes: 32,
            dim: 32,
            token_dim: 16,
            prompt_len: DEFAULT_PROMPT_LEN,
            sigma: 0.05,
            domain_shift_scale: 0.1,
            class_shift_scale: 1.0,
        }
    }
}

impl SyntheticWorldSpec {
    /// Spec with `token_dim = dim / 2` and default noise and shifts.
    pub fn new(seed: u64, classes: usize, dim: usize) -> Self {
        SyntheticWorldSpec {
            seed,
            classes,
            dim,
            token_dim: (dim / 2).max(1),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 || self.token_dim == 0 || self.prompt_len == 0 {
            return Err(CakiError::invalid(format!(
                "world dimensions must be positive: {self:?}"
            )));
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.sigma) || !nonneg(self.domain_shift_scale) || !nonneg(self.class_shift_scale)
        {
            return Err(CakiError::invalid(format!(
                "noise and shift scales must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"caki-synthetic-world");
        h.update(self.seed.to_le_bytes());
        for v in [self.classes, self.dim, self.token_dim, self.prompt_len] {
            h.update((v as u64).to_le_bytes());
        }
        for v in [self.sigma, self.domain_shift_scale, self.class_shift_scale] {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Frozen synthetic encoder.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    spec: SyntheticWorldSpec,
    prompt_map: Matrix,
    token_map: Matrix,
    bias: Vec<f64>,
    domain_shift: Vec<f64>,
    class_shifts: Vec<Vec<f64>>,
    prototypes: Vec<Embedding>,
    fingerprint: EncoderFingerprint,
}

/// Produces sample identities for a synthetic world.
#[derive(Debug, Clone, Copy)]
pub struct SampleFactory {
    classes: usize,
    seed: u64,
}

impl SampleFactory {
    pub fn sample(&self, class: usize, noise: u64) -> Sample {
        debug_assert!(class < self.classes);
        Sample::Synthetic { class, noise }
    }

    /// `count` distinct-noise samples of `class`, keyed by (`draw_seed`, `tag`).
    pub fn draw(&self, class: usize, count: usize, draw_seed: u64, tag: u64) -> Vec<Sample> {
        (0..count as u64)
            .map(|i| Sample::Synthetic {
                class,
                noise: seed::derive(&[self.seed, draw_seed, tag, class as u64, i]),
            })
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vec(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub(crate) fn class_name(index: usize) -> String {
    format!("class_{index:03}")
}

/// Builds the frozen world, its class catalog and a sample factory.
pub fn make_synthetic_world(
    spec: SyntheticWorldSpec,
) -> Result<(SyntheticWorld, ClassCatalog, SampleFactory)> {
    spec.validate()?;
    let SyntheticWorldSpec { dim, token_dim, classes, .. } = spec;

    // Gain chosen so that a token-scale input maps to unit-variance outputs.
    let gain = 1.0 / (TOKEN_SCALE * (token_dim as f64).sqrt());
    let mut head_rng = seed::rng(&[spec.seed, seed::TAG_TEXT_HEAD]);
    let prompt_map = gaussian_matrix(&mut head_rng, dim, token_dim, PROMPT_GAIN * gain);
    let token_map = gaussian_matrix(&mut head_rng, dim, token_dim, gain);
    let bias = gaussian_vec(&mut head_rng, dim, BIAS_SCALE);

    let mut token_rng = seed::rng(&[spec.seed, seed::TAG_CLASS_TOKENS]);
    let class_tokens: Vec<Vec<f64>> = (0..classes)
        .map(|_| gaussian_vec(&mut token_rng, token_dim, TOKEN_SCALE))
        .collect();

    let mut shift_rng = seed::rng(&[spec.seed, seed::TAG_SHIFTS]);
    let z_dom = gaussian_vec(&mut shift_rng, token_dim, TOKEN_SCALE);
    let domain_shift: Vec<f64> = prompt_map
        .matvec(&z_dom)
        .into_iter()
        .map(|v| spec.domain_shift_scale * v)
        .collect();
    let class_shifts: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let z = gaussian_vec(&mut shift_rng, token_dim, TOKEN_SCALE);
            prompt_map
                .matvec(&z)
                .into_iter()
                .map(|v| spec.class_shift_scale * v)
                .collect()
        })
        .collect();

    let prototypes = class_tokens
        .iter()
        .zip(&class_shifts)
        .map(|(token, shift)| {
            let be = token_map.matvec(token);
            let raw: Vec<f64> = (0..dim)
                .map(|i| be[i] + bias[i] + domain_shift[i] + shift[i])
                .collect();
            Embedding::normalized(&raw)
        })
        .collect::<Result<Vec<_>>>()?;

    let fingerprint = EncoderFingerprint {
        kind: BackendKind::Synthetic,
        dim,
        token_dim,
        prompt_len: spec.prompt_len,
        digest: spec.digest(),
    };
    let catalog = ClassCatalog::new((0..classes).map(class_name).collect(), class_tokens)?;
    let world = SyntheticWorld {
        spec,
        prompt_map,
        token_map,
        bias,
        domain_shift,
        class_shifts,
        prototypes,
        fingerprint,
    };
    let factory = SampleFactory { classes, seed: spec.seed };
    Ok((world, catalog, factory))
}

impl SyntheticWorld {
    pub fn spec(&self) -> &SyntheticWorldSpec {
        &self.spec
    }

    /// Noise-free image feature of `class`.
    pub fn prototype(&self, class: usize) -> &Embedding {
        &self.prototypes[class]
    }

    /// Frozen prompt map `A` (D × Dt).
    pub fn prompt_map(&self) -> &Matrix {
        &self.prompt_map
    }

    /// Frozen class-token map `B` (D × Dt).
    pub fn token_map(&self) -> &Matrix {
        &self.token_map
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn domain_shift(&self) -> &[f64] {
        &self.domain_shift
    }

    pub fn class_shift(&self, class: usize) -> &[f64] {
        &self.class_shifts[class]
    }

    fn text_preactivation(&self, prompt: &TokenMatrix, class_token: &[f64]) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        if class_token.len() != self.spec.token_dim {
            return Err(CakiError::invalid(format!(
                "class token width {} does not match Dt={}",
                class_token.len(),
                self.spec.token_dim
            )));
        }
        let ap = self.prompt_map.matvec(&prompt.mean_rows());
        let be = self.token_map.matvec(class_token);
        Ok((0..self.spec.dim)
            .map(|i| ap[i] + be[i] + self.bias[i])
            .collect())
    }
}

impl Encoder for SyntheticWorld {
    fn dims(&self) -> Dims {
        Dims {
            dim: self.spec.dim,
            token_dim: self.spec.token_dim,
            prompt_len: self.spec.prompt_len,
        }
    }

    fn fingerprint(&self) -> EncoderFingerprint {
        self.fingerprint
    }

    fn encode_image(&self, sample: &Sample) -> Result<Embedding> {
        let (class, noise) = match *sample {
            Sample::Synthetic { class, noise } => (class, noise),
            Sample::Record(id) => {
                return Err(CakiError::NotFound(format!(
                    "synthetic world has no stored record {id}"
                )))
            }
        };
        let proto = self.prototypes.get(class).ok_or_else(|| {
            CakiError::NotFound(format!(
                "class {class} not in a world of {} classes",
                self.spec.classes
            ))
        })?;
        if self.spec.sigma == 0.0 {
            return Ok(proto.clone());
        }
        let mut rng = seed::rng(&[self.spec.seed, seed::TAG_IMAGE_NOISE, class as u64, noise]);
        let raw: Vec<f64> = proto
            .iter()
            .map(|&v| v + self.spec.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Embedding::normalized(&raw)
    }

    fn encode_text(&self, prompt: &TokenMatrix, class_token: &[f64]) -> Result<Embedding> {
        Embedding::normalized(&self.text_preactivation(prompt, class_token)?)
    }

    fn encode_text_vjp(
        &self,
        prompt: &TokenMatrix,
        class_token: &[f64],
        cotangent: &[f64],
    ) -> Result<TokenMatrix> {
        if cotangent.len() != self.spec.dim {
            return Err(CakiError::invalid(format!(
                "cotangent length {} does not match D={}",
                cotangent.len(),
                self.spec.dim
            )));
        }
        let u = self.text_preactivation(prompt, class_token)?;
        let n = norm(&u);
        if n == 0.0 {
            return Err(CakiError::Degenerate("zero text pre-activation".into()));
        }
        let t: Vec<f64> = u.iter().map(|v| v / n).collect();
        let proj = dot(&t, cotangent);
        // (I - t tᵀ) g / ‖u‖
        let grad_u: Vec<f64> = cotangent
            .iter()
            .zip(&t)
            .map(|(g, ti)| (g - ti * proj) / n)
            .collect();
        let grad_mean = self.prompt_map.matvec_t(&grad_u);
        let rows = prompt.rows();
        let inv = 1.0 / rows as f64;
        Ok(Matrix::from_fn(rows, prompt.cols(), |_, c| grad_mean[c] * inv))
    }

    fn supports_vjp(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{template_prompt, DEFAULT_TEMPLATE};
    use crate::numerics::{argmax, cosine};

    fn spec(seed: u64, classes: usize, dim: usize, token_dim: usize, prompt_len: usize) -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            seed,
            classes,
            dim,
            token_dim,
            prompt_len,
            ..Default::default()
        }
    }

    fn random_prompt(seed: u64, rows: usize, cols: usize) -> TokenMatrix {
        let mut rng = crate::seed::rng(&[seed, 99]);
        Matrix::from_fn(rows, cols, |_, _| TOKEN_SCALE * rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn zero_noise_image_is_prototype() {
        let s = SyntheticWorldSpec { sigma: 0.0, ..spec(7, 4, 16, 8, 4) };
        let (world, _, factory) = make_synthetic_world(s).unwrap();
        for c in 0..4 {
            let img = world.encode_image(&factory.sample(c, 123)).unwrap();
            assert_eq!(&img, world.prototype(c));
        }
    }

    #[test]
    fn noisy_image_is_deterministic_and_unit() {
        let s = SyntheticWorldSpec { sigma: 0.1, ..spec(7, 4, 16, 8, 4) };
        let (world, _, factory) = make_synthetic_world(s).unwrap();
        let a = world.encode_image(&factory.sample(2, 5)).unwrap();
        let b = world.encode_image(&factory.sample(2, 5)).unwrap();
        let c = world.encode_image(&factory.sample(2, 6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((norm(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_samples_are_not_found() {
        let (world, _, _) = make_synthetic_world(spec(7, 4, 16, 8, 4)).unwrap();
        assert!(matches!(world.encode_image(&Sample::Record(0)), Err(CakiError::NotFound(_))));
        assert!(matches!(
            world.encode_image(&Sample::Synthetic { class: 9, noise: 0 }),
            Err(CakiError::NotFound(_))
        ));
    }

    #[test]
    fn zero_prompt_text_is_token_plus_bias() {
        let (world, catalog, _) = make_synthetic_world(spec(3, 5, 16, 8, 4)).unwrap();
        let zero = Matrix::zeros(4, 8);
        for c in 0..5 {
            let be = world.token_map().matvec(catalog.token(c));
            let raw: Vec<f64> = be.iter().zip(world.bias()).map(|(a, b)| a + b).collect();
            let expected = Embedding::normalized(&raw).unwrap();
            assert_eq!(world.encode_text(&zero, catalog.token(c)).unwrap(), expected);
        }
    }

    #[test]
    fn text_matches_straight_line_formula() {
        let (world, catalog, _) = make_synthetic_world(spec(7, 6, 16, 8, 4)).unwrap();
        let prompt = random_prompt(1, 4, 8);
        let a = world.prompt_map();
        let b = world.token_map();
        for c in 0..6 {
            let e = catalog.token(c);
            let mut u = vec![0.0; 16];
            for i in 0..16 {
                let mut acc = world.bias()[i];
                for j in 0..8 {
                    let mut pooled = 0.0;
                    for r in 0..4 {
                        pooled += prompt.get(r, j);
                    }
                    acc += a.get(i, j) * pooled / 4.0 + b.get(i, j) * e[j];
                }
                u[i] = acc;
            }
            let len = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let got = world.encode_text(&prompt, e).unwrap();
            for i in 0..16 {
                assert!((got[i] - u[i] / len).abs() < 1e-14, "class {c} dim {i}");
            }
            assert_eq!(got, world.encode_text(&prompt, e).unwrap());
        }
    }

    #[test]
    fn text_rejects_shape_mismatch() {
        let (world, catalog, _) = make_synthetic_world(spec(7, 2, 16, 8, 4)).unwrap();
        let bad = Matrix::zeros(3, 8);
        assert!(matches!(
            world.encode_text(&bad, catalog.token(0)),
            Err(CakiError::InvalidArgument(_))
        ));
        assert!(matches!(
            world.encode_text_vjp(&Matrix::zeros(4, 8), catalog.token(0), &[0.0; 3]),
            Err(CakiError::InvalidArgument(_))
        ));
    }

    #[test]
    fn vjp_zero_cotangent() {
        let (world, catalog, _) = make_synthetic_world(spec(7, 2, 16, 8, 4)).unwrap();
        let p = random_prompt(2, 4, 8);
        let g = world.encode_text_vjp(&p, catalog.token(1), &[0.0; 16]).unwrap();
        assert_eq!(g, Matrix::zeros(4, 8));
    }

    #[test]
    fn vjp_matches_central_differences() {
        let h = 1e-6;
        for trial in 0..20u64 {
            let (world, catalog, _) = make_synthetic_world(spec(100 + trial, 3, 16, 8, 4)).unwrap();
            let p = random_prompt(trial, 4, 8);
            let mut rng = crate::seed::rng(&[trial, 5]);
            let cot: Vec<f64> = (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let class = (trial % 3) as usize;
            let f = |q: &TokenMatrix| dot(&world.encode_text(q, catalog.token(class)).unwrap(), &cot);
            let analytic = world.encode_text_vjp(&p, catalog.token(class), &cot).unwrap();
            for r in 0..4 {
                for c in 0..8 {
                    let mut plus = p.clone();
                    plus.set(r, c, p.get(r, c) + h);
                    let mut minus = p.clone();
                    minus.set(r, c, p.get(r, c) - h);
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    let a = analytic.get(r, c);
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-5, "trial {trial} ({r},{c}): {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn vjp_pooling_factor() {
        // Same mean-pooled prompt at L=1 and L=4: per-row gradient scales by 1/L.
        let (w1, cat, _) = make_synthetic_world(spec(7, 2, 16, 8, 1)).unwrap();
        let (w4, _, _) = make_synthetic_world(spec(7, 2, 16, 8, 4)).unwrap();
        let row = random_prompt(4, 1, 8);
        let p4 = Matrix::from_fn(4, 8, |_, c| row.get(0, c));
        let cot: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let g1 = w1.encode_text_vjp(&row, cat.token(0), &cot).unwrap();
        let g4 = w4.encode_text_vjp(&p4, cat.token(0), &cot).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                assert!((g4.get(r, c) * 4.0 - g1.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_spec_same_world() {
        let s = spec(7, 8, 16, 8, 4);
        let (a, ca, _) = make_synthetic_world(s).unwrap();
        let (b, cb, _) = make_synthetic_world(s).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(ca, cb);
        for c in 0..8 {
            assert_eq!(a.prototype(c), b.prototype(c));
        }
        let (other, _, _) = make_synthetic_world(SyntheticWorldSpec { sigma: 0.2, ..s }).unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
    }

    #[test]
    fn shift_free_world_aligns_zero_prompt_with_prototypes() {
        let s = SyntheticWorldSpec {
            sigma: 0.0,
            domain_shift_scale: 0.0,
            class_shift_scale: 0.0,
            ..spec(7, 16, 32, 16, 4)
        };
        let (world, catalog, factory) = make_synthetic_world(s).unwrap();
        let zero = Matrix::zeros(4, 16);
        let texts: Vec<Embedding> = (0..16)
            .map(|c| world.encode_text(&zero, catalog.token(c)).unwrap())
            .collect();
        for c in 0..16 {
            assert_eq!(&texts[c], world.prototype(c));
            let img = world.encode_image(&factory.sample(c, 0)).unwrap();
            let sims: Vec<f64> = texts.iter().map(|t| cosine(t, &img).unwrap()).collect();
            assert_eq!(argmax(&sims), c);
        }
    }

    #[test]
    fn template_prompt_has_default_shape() {
        let (world, _, _) = make_synthetic_world(SyntheticWorldSpec::default()).unwrap();
        let t = template_prompt(DEFAULT_TEMPLATE, world.dims().prompt_len, world.dims().token_dim);
        assert_eq!(t.shape(), (4, 16));
        world.check_prompt(&t).unwrap();
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(make_synthetic_world(SyntheticWorldSpec { classes: 0, ..Default::default() }).is_err());
        assert!(make_synthetic_world(SyntheticWorldSpec { sigma: -1.0, ..Default::default() }).is_err());
    }
}
