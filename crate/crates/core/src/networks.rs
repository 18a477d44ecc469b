//! Model definition: parameter storage, initialization and the forward
//! functions of every network piece.
//!
//! The model is deliberately small — a three-layer convolutional encoder for
//! the image, a per-point MLP for the cloud, one linear classifier head per
//! modality, an offset-prediction head for deformable pooling, and a bank of
//! per-pairing domain discriminators.
//!
//! Parameters live in a [`ParamStore`] as plain host buffers.  Every training
//! step binds them onto a fresh tape with [`ParamStore::bind_with`]; names
//! excluded by the filter are bound as detached constants, which is how the
//! generator step treats discriminator weights as fixed (and vice versa)
//! without ever copying the model.
//!
//! Initialization draws each parameter from its own named stream
//! (`init/<name>`), so adding or reordering parameters never perturbs the
//! values of the others.  The offset head and every discriminator's final
//! layer start at exactly zero: deformable pooling therefore begins as plain
//! grid pooling, and fresh discriminators score 0.5 everywhere.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream;
use crate::tensor::{gemm, record_binary_map, transpose, Tape, Tensor};

/// Widths and sizes of the model.  `classes` includes the background class;
/// `patch_k` is the pooling patch edge (odd).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub conv_width: usize,
    pub mlp_width: usize,
    pub disc_width: usize,
    pub patch_k: usize,
    /// Register the offset-prediction head.
    pub offset_head: bool,
    /// Discriminator pairings to register, e.g. "s2d_t2d".
    pub pairings: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 6,
            feature_dim: 16,
            conv_width: 16,
            mlp_width: 32,
            disc_width: 64,
            patch_k: 5,
            offset_head: true,
            pairings: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.classes >= 2
            && self.feature_dim >= 1
            && self.conv_width >= 1
            && self.mlp_width >= 1
            && self.disc_width >= 1
            && self.patch_k % 2 == 1
            && self.patch_k >= 1;
        if !ok {
            return Err(crate::Error::Config(format!("model config out of range: {self:?}")));
        }
        for p in &self.pairings {
            if !PAIRINGS.contains(&p.as_str()) {
                return Err(crate::Error::Config(format!(
                    "unknown discriminator pairing '{p}' (expected one of {PAIRINGS:?})"
                )));
            }
        }
        Ok(())
    }
}

/// The four source/target prediction pairings a discriminator can compare:
/// source-2D vs target-3D, source-3D vs target-2D, and the two within-modal
/// pairings.
pub const PAIRINGS: [&str; 4] = ["s2d_t3d", "s3d_t2d", "s2d_t2d", "s3d_t3d"];

/// Parameter initialization schemes.
pub enum Init {
    /// U[-a, a] with a = 1/sqrt(fan_in).
    FanIn(usize),
    Zero,
}

struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Named, ordered collection of trainable parameters.
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    /// Adds a parameter; initialization draws from a stream named after the
    /// parameter, so unrelated parameters never share randomness.
    pub fn register(&mut self, master_seed: u64, name: &str, shape: &[usize], init: Init) {
        assert!(!self.index.contains_key(name), "duplicate parameter '{name}'");
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![0.0; len],
            Init::FanIn(fan_in) => {
                let a = 1.0 / (fan_in as f64).sqrt();
                let mut rng = stream(master_seed, &format!("init/{name}"));
                (0..len).map(|_| rng.random_range(-a..a)).collect()
            }
        };
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape: shape.to_vec(), data });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        &self.entries[self.idx(name)].shape
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self.entries[self.idx(name)].data
    }

    /// Overwrites a parameter's values (optimizer updates, checkpoint load).
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) {
        let i = self.idx(name);
        assert_eq!(data.len(), self.entries[i].data.len(), "size mismatch for '{name}'");
        self.entries[i].data = data;
    }

    /// In-place mutable access for the optimizer's update loop.
    pub fn data_mut(&mut self, name: &str) -> &mut [f64] {
        let i = self.idx(name);
        &mut self.entries[i].data
    }

    fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    /// Binds every parameter onto `tape` as an attached leaf when
    /// `attached(name)` holds, and as a detached constant otherwise.
    pub fn bind_with(&self, tape: &Tape, attached: impl Fn(&str) -> bool) -> Bound {
        let mut map = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let t = if attached(&e.name) {
                tape.leaf(&e.shape, e.data.clone())
            } else {
                Tensor::constant(&e.shape, e.data.clone())
            };
            map.insert(e.name.clone(), t);
        }
        Bound { map }
    }

    /// Binds everything attached.
    pub fn bind(&self, tape: &Tape) -> Bound {
        self.bind_with(tape, |_| true)
    }
}

/// Tape-bound view of the parameter store for one forward/backward pass.
pub struct Bound {
    map: HashMap<String, Tensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }
}

/// The full model: a parameter store plus the sizes needed by the forward
/// functions.
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Registers and initializes all parameters from `master_seed`.
    pub fn new(cfg: ModelConfig, master_seed: u64) -> crate::Result<Model> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let (cw, mw, dw) = (cfg.conv_width, cfg.mlp_width, cfg.disc_width);
        let (d, c) = (cfg.feature_dim, cfg.classes);

        s.register(master_seed, "g2d/conv1/w", &[3, 3, 3, cw], Init::FanIn(27));
        s.register(master_seed, "g2d/conv1/b", &[cw], Init::FanIn(27));
        s.register(master_seed, "g2d/conv2/w", &[3, 3, cw, cw], Init::FanIn(9 * cw));
        s.register(master_seed, "g2d/conv2/b", &[cw], Init::FanIn(9 * cw));
        s.register(master_seed, "g2d/conv3/w", &[3, 3, cw, d], Init::FanIn(9 * cw));
        s.register(master_seed, "g2d/conv3/b", &[d], Init::FanIn(9 * cw));
        s.register(master_seed, "head2d/w", &[d, c], Init::FanIn(d));
        s.register(master_seed, "head2d/b", &[c], Init::FanIn(d));

        s.register(master_seed, "g3d/fc1/w", &[3, mw], Init::FanIn(3));
        s.register(master_seed, "g3d/fc1/b", &[mw], Init::FanIn(3));
        s.register(master_seed, "g3d/fc2/w", &[mw, mw], Init::FanIn(mw));
        s.register(master_seed, "g3d/fc2/b", &[mw], Init::FanIn(mw));
        s.register(master_seed, "g3d/fc3/w", &[mw, d], Init::FanIn(mw));
        s.register(master_seed, "g3d/fc3/b", &[d], Init::FanIn(mw));
        s.register(master_seed, "head3d/w", &[d, c], Init::FanIn(d));
        s.register(master_seed, "head3d/b", &[c], Init::FanIn(d));

        if cfg.offset_head {
            let kk2 = 2 * cfg.patch_k * cfg.patch_k;
            s.register(master_seed, "offsets/w", &[3, 3, d, kk2], Init::Zero);
            s.register(master_seed, "offsets/b", &[kk2], Init::Zero);
        }
        for pairing in &cfg.pairings {
            let base = format!("d/{pairing}");
            s.register(master_seed, &format!("{base}/fc1/w"), &[c, dw], Init::FanIn(c));
            s.register(master_seed, &format!("{base}/fc1/b"), &[dw], Init::FanIn(c));
            s.register(master_seed, &format!("{base}/fc2/w"), &[dw, dw], Init::FanIn(dw));
            s.register(master_seed, &format!("{base}/fc2/b"), &[dw], Init::FanIn(dw));
            s.register(master_seed, &format!("{base}/fc3/w"), &[dw, 1], Init::Zero);
            s.register(master_seed, &format!("{base}/fc3/b"), &[1], Init::Zero);
        }
        Ok(Model { cfg, store: s })
    }

    /// Image encoder: three 3x3 same-padding convolutions with ReLU between,
    /// `[h, w, 3] -> [h, w, feature_dim]`.  No activation after the last
    /// layer so features keep both signs.
    pub fn forward_2d(&self, p: &Bound, image: &Tensor) -> Tensor {
        let x = image.conv2d(p.get("g2d/conv1/w"), Some(p.get("g2d/conv1/b"))).relu();
        let x = x.conv2d(p.get("g2d/conv2/w"), Some(p.get("g2d/conv2/b"))).relu();
        x.conv2d(p.get("g2d/conv3/w"), Some(p.get("g2d/conv3/b")))
    }

    /// Point encoder: per-point MLP on normalized coordinates,
    /// `[n, 3] -> [n, feature_dim]`.
    pub fn forward_3d(&self, p: &Bound, points: &Tensor) -> Tensor {
        let x = points.matmul(p.get("g3d/fc1/w")).add(p.get("g3d/fc1/b")).relu();
        let x = x.matmul(p.get("g3d/fc2/w")).add(p.get("g3d/fc2/b")).relu();
        x.matmul(p.get("g3d/fc3/w")).add(p.get("g3d/fc3/b"))
    }

    /// Image-branch classifier: affine map then softmax, `[m, d] -> [m,
    /// classes]` with every row on the probability simplex.  The same head
    /// serves every feature row derived from the image — max-, min- and
    /// avg-pooled patch vectors and directly sampled pixels alike.  A head
    /// with zero weights and bias yields uniform rows.
    pub fn classify_2d(&self, p: &Bound, rows: &Tensor) -> Tensor {
        rows.matmul(p.get("head2d/w")).add(p.get("head2d/b")).softmax(1)
    }

    /// Point-branch classifier: affine map then softmax, `[m, d] -> [m,
    /// classes]` rows on the simplex.
    pub fn classify_3d(&self, p: &Bound, rows: &Tensor) -> Tensor {
        rows.matmul(p.get("head3d/w")).add(p.get("head3d/b")).softmax(1)
    }

    /// Offset head: predicts per-point patch displacements `[n, k^2, 2]`
    /// (last axis `(du, dv)`) by evaluating a 3x3 convolution over the
    /// feature map at each point's centre pixel only.
    ///
    /// The convolution is computed sparsely at the distinct centre pixels and
    /// the rows are then distributed to the points, which is equivalent to
    /// running the dense convolution and reading it at those pixels (the unit
    /// tests pin that equivalence).
    pub fn predict_offsets(
        &self,
        p: &Bound,
        feat: &Tensor,
        centers: &[(usize, usize)],
    ) -> Tensor {
        let k = self.cfg.patch_k;
        let kk = k * k;
        let mut unique: Vec<(usize, usize)> = Vec::new();
        let mut idx_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut rows = Vec::with_capacity(centers.len());
        for &c in centers {
            let next = unique.len();
            let i = *idx_of.entry(c).or_insert_with(|| {
                unique.push(c);
                next
            });
            rows.push(i);
        }
        let sp = sparse_conv_at(feat, p.get("offsets/w"), &unique);
        let sp = sp.add(p.get("offsets/b"));
        sp.gather_rows(&rows).reshape(&[centers.len(), kk, 2])
    }

    /// Domain discriminator for one pairing: per-row class probabilities
    /// `[n, classes]` -> (sigmoid scores `[n, 1]`, their mean as a scalar).
    /// A freshly initialized discriminator outputs exactly 0.5 everywhere
    /// (zero final layer).
    pub fn discriminate(&self, p: &Bound, pairing: &str, probs: &Tensor) -> (Tensor, Tensor) {
        let base = format!("d/{pairing}");
        let x = probs
            .matmul(p.get(&format!("{base}/fc1/w")))
            .add(p.get(&format!("{base}/fc1/b")))
            .relu();
        let x = x
            .matmul(p.get(&format!("{base}/fc2/w")))
            .add(p.get(&format!("{base}/fc2/b")))
            .relu();
        let scores = x
            .matmul(p.get(&format!("{base}/fc3/w")))
            .add(p.get(&format!("{base}/fc3/b")))
            .sigmoid();
        let rho = scores.mean();
        (scores, rho)
    }
}

/// Normalizes raw world coordinates into the fixed scene volume so the point
/// MLP sees inputs of order one: x over the ground half-width, y and z over
/// their scene extents, each mapped towards [-1, 1].
pub fn normalize_points(points: &[f64]) -> Vec<f64> {
    assert!(points.len() % 3 == 0);
    let mut out = Vec::with_capacity(points.len());
    for p in points.chunks_exact(3) {
        out.push(p[0] / 9.0);
        out.push((p[1] - 0.85) / 0.85);
        out.push((p[2] - 8.6) / 6.4);
    }
    out
}

/// Evaluates a same-padding convolution at selected pixels only:
/// `[h, w, cin] * [kh, kw, cin, cout]` read at `pixels` (px, py) -> `[m, cout]`.
///
/// Taps outside the image contribute zero, matching the dense convolution's
/// padding, so the result equals reading the dense output at those pixels.
pub(crate) fn sparse_conv_at(feat: &Tensor, weight: &Tensor, pixels: &[(usize, usize)]) -> Tensor {
    assert_eq!(feat.rank(), 3);
    assert_eq!(weight.rank(), 4);
    let (h, w, cin) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let (kh, kw, wcin, cout) =
        (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    assert_eq!(cin, wcin, "channel mismatch");
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernel must be odd");
    let m = pixels.len();
    let (ph, pw) = (kh / 2, kw / 2);
    let pixels: std::rc::Rc<[(usize, usize)]> = pixels.into();
    for &(px, py) in pixels.iter() {
        assert!(px < w && py < h, "pixel ({px}, {py}) outside {w}x{h} map");
    }

    // Both passes work on a gathered patch matrix [m, kh*kw*cin] whose rows
    // hold the receptive field of each pixel (zeros where taps fall outside
    // the map); the convolution is then one product against the kernel viewed
    // as [kh*kw*cin, cout].
    let kc = kh * kw * cin;
    let gather = {
        let pixels = std::rc::Rc::clone(&pixels);
        move |fd: &[f64]| -> Vec<f64> {
            let mut patches = vec![0.0; pixels.len() * kc];
            for (mi, &(px, py)) in pixels.iter().enumerate() {
                let prow = &mut patches[mi * kc..(mi + 1) * kc];
                for dy in 0..kh {
                    let y = py + dy;
                    if y < ph || y - ph >= h {
                        continue;
                    }
                    let y = y - ph;
                    for dx in 0..kw {
                        let x = px + dx;
                        if x < pw || x - pw >= w {
                            continue;
                        }
                        let x = x - pw;
                        prow[(dy * kw + dx) * cin..][..cin]
                            .copy_from_slice(&fd[(y * w + x) * cin..][..cin]);
                    }
                }
            }
            patches
        }
    };

    let fwd = {
        let gather = gather.clone();
        move |fd: &[f64], wd_opt: Option<&[f64]>| -> Vec<f64> {
            let wd = wd_opt.expect("weight data");
            let mut out = vec![0.0; m * cout];
            gemm(&gather(fd), wd, &mut out, m, kc, cout);
            out
        }
    };

    let pixels_b = std::rc::Rc::clone(&pixels);
    record_binary_map(
        feat,
        Some(weight),
        &[m, cout],
        fwd,
        move |g, fd, wd_opt, mut d_feat, mut d_w| {
            let wd = wd_opt.expect("weight data");
            if let Some(df) = d_feat.as_deref_mut() {
                // d_patches = g . W^T, scattered back onto in-range taps.
                let wt = transpose(wd, kc, cout);
                let mut dp = vec![0.0; m * kc];
                gemm(g, &wt, &mut dp, m, cout, kc);
                for (mi, &(px, py)) in pixels_b.iter().enumerate() {
                    let drow = &dp[mi * kc..(mi + 1) * kc];
                    for dy in 0..kh {
                        let y = py + dy;
                        if y < ph || y - ph >= h {
                            continue;
                        }
                        let y = y - ph;
                        for dx in 0..kw {
                            let x = px + dx;
                            if x < pw || x - pw >= w {
                                continue;
                            }
                            let x = x - pw;
                            let dst = &mut df[(y * w + x) * cin..][..cin];
                            for (d, &s) in dst.iter_mut().zip(&drow[(dy * kw + dx) * cin..][..cin])
                            {
                                *d += s;
                            }
                        }
                    }
                }
            }
            if let Some(dw) = d_w.as_deref_mut() {
                // dW = patches^T . g
                let pt = transpose(&gather(fd), m, kc);
                gemm(&pt, g, dw, kc, m, cout);
            }
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::grad_check_default;
    use rand::Rng;

    fn test_cfg() -> ModelConfig {
        ModelConfig {
            classes: 4,
            feature_dim: 5,
            conv_width: 6,
            mlp_width: 7,
            disc_width: 8,
            patch_k: 3,
            offset_head: true,
            pairings: vec!["s2d_t2d".to_string(), "s3d_t3d".to_string()],
        }
    }

    #[test]
    fn forward_shapes_are_consistent() {
        let model = Model::new(test_cfg(), 1).unwrap();
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let image = Tensor::constant(&[6, 8, 3], vec![0.5; 6 * 8 * 3]);
        let feat = model.forward_2d(&p, &image);
        assert_eq!(feat.shape(), &[6, 8, 5]);
        let rows = feat.reshape(&[48, 5]);
        let probs2d = model.classify_2d(&p, &rows);
        assert_eq!(probs2d.shape(), &[48, 4]);
        for row in probs2d.data().chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let pts = Tensor::constant(&[10, 3], normalize_points(&vec![1.0; 30]));
        let f3 = model.forward_3d(&p, &pts);
        assert_eq!(f3.shape(), &[10, 5]);
        let probs3d = model.classify_3d(&p, &f3);
        assert_eq!(probs3d.shape(), &[10, 4]);
        let off = model.predict_offsets(&p, &feat, &[(0, 0), (3, 2), (0, 0)]);
        assert_eq!(off.shape(), &[3, 9, 2]);
        let (score, rho) = model.discriminate(&p, "s2d_t2d", &probs3d);
        assert_eq!(score.shape(), &[10, 1]);
        let mean = score.data().iter().sum::<f64>() / 10.0;
        assert!((rho.data()[0] - mean).abs() < 1e-15);
    }

    #[test]
    fn zero_classifier_head_yields_uniform_rows() {
        let mut model = Model::new(test_cfg(), 1).unwrap();
        model.store.set_data("head2d/w", vec![0.0; 5 * 4]);
        model.store.set_data("head2d/b", vec![0.0; 4]);
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let rows = Tensor::constant(&[3, 5], (0..15).map(|i| i as f64 * 0.3 - 2.0).collect());
        let probs = model.classify_2d(&p, &rows);
        assert!(probs.data().iter().all(|&v| v == 0.25), "{:?}", probs.data());
    }

    #[test]
    fn initialization_is_deterministic_and_name_keyed() {
        let a = Model::new(test_cfg(), 9).unwrap();
        let b = Model::new(test_cfg(), 9).unwrap();
        let c = Model::new(test_cfg(), 10).unwrap();
        for name in a.store.names() {
            assert_eq!(a.store.data(name), b.store.data(name), "{name}");
        }
        assert_ne!(a.store.data("g2d/conv1/w"), c.store.data("g2d/conv1/w"));
        assert_ne!(a.store.data("g2d/conv1/w")[..6], a.store.data("g2d/conv2/w")[..6]);
    }

    #[test]
    fn fresh_offset_head_predicts_exactly_zero() {
        let model = Model::new(test_cfg(), 3).unwrap();
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let image = Tensor::constant(&[6, 8, 3], (0..144).map(|i| i as f64 / 144.0).collect());
        let feat = model.forward_2d(&p, &image);
        let off = model.predict_offsets(&p, &feat, &[(1, 1), (5, 4)]);
        assert!(off.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_discriminator_scores_half_everywhere() {
        let model = Model::new(test_cfg(), 3).unwrap();
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let probs = Tensor::constant(&[5, 4], vec![0.25; 20]);
        for pairing in ["s2d_t2d", "s3d_t3d"] {
            let (s, rho) = model.discriminate(&p, pairing, &probs);
            assert!(s.data().iter().all(|&v| v == 0.5), "{pairing}: {:?}", s.data());
            assert_eq!(rho.data(), &[0.5]);
        }
    }

    #[test]
    fn sparse_offset_conv_matches_dense_convolution() {
        let mut model = Model::new(test_cfg(), 3).unwrap();
        let mut rng = stream(5, "test-sparse-dense");
        // Randomize the offset head so the comparison is non-trivial.
        let wlen: usize = model.store.shape("offsets/w").iter().product();
        let blen: usize = model.store.shape("offsets/b").iter().product();
        model
            .store
            .set_data("offsets/w", (0..wlen).map(|_| rng.random_range(-1.0..1.0)).collect());
        model
            .store
            .set_data("offsets/b", (0..blen).map(|_| rng.random_range(-1.0..1.0)).collect());
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let feat = Tensor::constant(
            &[5, 7, 5],
            (0..5 * 7 * 5).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        // Pixels include corners and a duplicate.
        let centers = [(0usize, 0usize), (6, 4), (3, 2), (3, 2), (0, 4)];
        let off = model.predict_offsets(&p, &feat, &centers);
        let dense = feat
            .conv2d(p.get("offsets/w"), Some(p.get("offsets/b")))
            .reshape(&[5 * 7, 18]);
        for (i, &(px, py)) in centers.iter().enumerate() {
            for c in 0..18 {
                let a = off.data()[(i * 9 + c / 2) * 2 + c % 2];
                let b = dense.data()[(py * 7 + px) * 18 + c];
                assert!(
                    (a - b).abs() <= 1e-12,
                    "pixel {i} channel {c}: sparse {a} vs dense {b}"
                );
            }
        }
    }

    #[test]
    fn sparse_conv_gradients_match_finite_differences() {
        let mut rng = stream(6, "test-sparse-fd");
        let (h, w, cin, cout) = (4, 5, 3, 2);
        let feat0: Vec<f64> = (0..h * w * cin).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..9 * cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pixels = vec![(0usize, 0usize), (4, 3), (2, 1)];
        // Through the feature map.
        let report = grad_check_default(
            &{
                let w0 = w0.clone();
                let pixels = pixels.clone();
                move |x: &Tensor| {
                    let wt = Tensor::constant(&[3, 3, cin, cout], w0.clone());
                    sparse_conv_at(x, &wt, &pixels).sum()
                }
            },
            &[h, w, cin],
            &feat0,
        );
        assert!(report.pass(), "feature grads: {report}");
        // Through the weights.
        let report = grad_check_default(
            &{
                let feat0 = feat0.clone();
                let pixels = pixels.clone();
                move |x: &Tensor| {
                    let ft = Tensor::constant(&[h, w, cin], feat0.clone());
                    sparse_conv_at(&ft, x, &pixels).sum()
                }
            },
            &[3, 3, cin, cout],
            &w0,
        );
        assert!(report.pass(), "weight grads: {report}");
    }

    #[test]
    fn detached_binding_blocks_gradients_but_not_flow() {
        let model = Model::new(test_cfg(), 3).unwrap();
        let tape = Tape::new();
        // Generator step: discriminator weights are constants.
        let p = model.store.bind_with(&tape, |n| !n.starts_with("d/"));
        let pts = Tensor::constant(&[4, 3], vec![0.1; 12]);
        let probs = model.classify_3d(&p, &model.forward_3d(&p, &pts));
        let (score, _) = model.discriminate(&p, "s3d_t3d", &probs);
        let grads = tape.backward(&score.sum()).unwrap();
        // Gradient reached the generator through the frozen discriminator;
        // the discriminator tensors themselves never joined the tape.
        assert!(grads.wrt(p.get("g3d/fc1/w")).is_some());
        assert!(!p.get("d/s3d_t3d/fc1/w").is_attached());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = test_cfg();
        cfg.patch_k = 2;
        assert!(Model::new(cfg, 0).is_err());
        let mut cfg = test_cfg();
        cfg.pairings = vec!["s2d_t9d".to_string()];
        assert!(Model::new(cfg, 0).is_err());
    }
}
