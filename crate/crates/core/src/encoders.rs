//! Modality encoders mapping text, sketch sequences and point clouds to
//! per-token feature maps in a shared `D`-dimensional space.

use ndarray::{s, Array1, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{one_hot_sequence, CadSequence, PointCloud, NUM_BINS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::layers::{sinusoidal_table, Linear, ParamDecl, ParamKind, TransformerEncoder};
use crate::params::ParamStore;
use crate::text::{TextEmbeddingProvider, TextQuery};

/// `L x D` features with a per-row validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Mat,
    pub valid_mask: Vec<bool>,
}

impl FeatureMap {
    pub fn new(values: Mat, valid_mask: Vec<bool>) -> Result<Self> {
        if values.nrows() != valid_mask.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} mask entries",
                values.nrows(),
                valid_mask.len()
            )));
        }
        Ok(FeatureMap { values, valid_mask })
    }

    /// All rows valid.
    pub fn dense(values: Mat) -> Self {
        let n = values.nrows();
        FeatureMap {
            values,
            valid_mask: vec![true; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        valid_rows(&self.valid_mask)
    }
}

pub(crate) fn valid_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect()
}

/// Average over valid rows.
pub fn pool(f: &FeatureMap) -> Result<Array1<f64>> {
    let rows = f.valid_rows();
    if rows.is_empty() {
        return Err(Error::Empty("pooling needs at least one valid row".into()));
    }
    let mut acc = Array1::zeros(f.dim());
    for &r in &rows {
        acc += &f.values.row(r);
    }
    Ok(acc / rows.len() as f64)
}

/// In-graph masked average pooling: `L x D -> 1 x D`.
pub fn pool_var(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    let rows = valid_rows(mask);
    if rows.is_empty() {
        return Err(Error::Empty("pooling needs at least one valid row".into()));
    }
    Ok(g.mean_rows(x, rows))
}

/// Frozen token embeddings, a trainable projection to `D`, positional
/// encoding and a transformer encoder stack.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub proj: Linear,
    pub encoder: TransformerEncoder,
    pub positional: Mat,
}

impl TextEncoder {
    pub fn new(
        provider_dim: usize,
        max_len: usize,
        dim: usize,
        layers: usize,
        n_heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Ok(TextEncoder {
            proj: Linear::new("text.proj", provider_dim, dim),
            encoder: TransformerEncoder::new("text", layers, dim, n_heads, ffn_hidden)?,
            positional: sinusoidal_table(max_len, dim),
        })
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.proj.declare(out);
        self.encoder.declare(out);
    }

    /// `F^T`, shape `L_T x D`.
    pub fn forward(&self, g: &mut Graph, token_embeddings: Mat, mask: &[bool]) -> Result<Var> {
        let len = token_embeddings.nrows();
        if len > self.positional.nrows() {
            return Err(Error::Config(format!(
                "text length {len} exceeds positional table {}",
                self.positional.nrows()
            )));
        }
        if token_embeddings.ncols() != self.proj.inp {
            return Err(Error::Config(format!(
                "token embeddings have width {}, encoder expects {}",
                token_embeddings.ncols(),
                self.proj.inp
            )));
        }
        let x = g.constant(token_embeddings);
        let x = self.proj.forward(g, x);
        let pe = g.constant(self.positional.slice(s![..len, ..]).to_owned());
        let x = g.add(x, pe);
        self.encoder.forward(g, x, mask)
    }

    /// Eval-mode convenience wrapper.
    pub fn embed(
        &self,
        store: &ParamStore,
        provider: &dyn TextEmbeddingProvider,
        query: &TextQuery,
    ) -> Result<FeatureMap> {
        let mut g = Graph::with_params(store);
        let out = self.forward(&mut g, provider.embed_tokens(query), &query.attn_mask)?;
        FeatureMap::new(g.value(out).clone(), query.attn_mask.clone())
    }
}

/// Coordinate embedding `S_x W_x + S_y W_y + P` followed by a transformer stack.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub wx: String,
    pub wy: String,
    pub dim: usize,
    /// Positional table; rows bound the accepted sequence length.
    pub positional: Mat,
    pub encoder: TransformerEncoder,
}

impl SequenceEncoder {
    pub fn new(max_len: usize, dim: usize, layers: usize, n_heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(SequenceEncoder {
            wx: "sequence.embed.wx".into(),
            wy: "sequence.embed.wy".into(),
            dim,
            positional: sinusoidal_table(max_len, dim),
            encoder: TransformerEncoder::new("sequence", layers, dim, n_heads, ffn_hidden)?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.positional.nrows()
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        for p in [&self.wx, &self.wy] {
            out.push(ParamDecl {
                path: p.clone(),
                shape: (NUM_BINS, self.dim),
                kind: ParamKind::Weight,
            });
        }
        self.encoder.declare(out);
    }

    /// `F^S_0` from a `(L_S, 2, 256)` one-hot tensor.
    pub fn initial_embedding(&self, g: &mut Graph, one_hot: &Array3<f64>) -> Result<Var> {
        let len = one_hot.dim().0;
        if len > self.max_len() {
            return Err(Error::Config(format!(
                "sequence length {len} exceeds max_len {}",
                self.max_len()
            )));
        }
        if one_hot.dim().1 != 2 || one_hot.dim().2 != NUM_BINS {
            return Err(Error::Shape(format!(
                "one-hot tensor must be (L, 2, {NUM_BINS}), got {:?}",
                one_hot.dim()
            )));
        }
        let sx = g.constant(one_hot.index_axis(Axis(1), 0).to_owned());
        let sy = g.constant(one_hot.index_axis(Axis(1), 1).to_owned());
        let wx = g.param(&self.wx);
        let wy = g.param(&self.wy);
        let ex = g.matmul(sx, wx);
        let ey = g.matmul(sy, wy);
        let e = g.add(ex, ey);
        let pe = g.constant(self.positional.slice(s![..len, ..]).to_owned());
        Ok(g.add(e, pe))
    }

    /// `F^S`, shape `L_S x D`.
    pub fn forward_one_hot(&self, g: &mut Graph, one_hot: &Array3<f64>, mask: &[bool]) -> Result<Var> {
        let x = self.initial_embedding(g, one_hot)?;
        self.encoder.forward(g, x, mask)
    }

    pub fn forward(&self, g: &mut Graph, seq: &CadSequence) -> Result<Var> {
        self.forward_one_hot(g, &one_hot_sequence(seq), &seq.valid_mask)
    }

    pub fn embed(&self, store: &ParamStore, seq: &CadSequence) -> Result<FeatureMap> {
        let mut g = Graph::with_params(store);
        let out = self.forward(&mut g, seq)?;
        FeatureMap::new(g.value(out).clone(), seq.valid_mask.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Shared per-point MLP with max-pooled neighborhood and global context.
    PointNet,
    /// Dot-product attention restricted to k-nearest neighborhoods.
    #[default]
    PointTransformer,
}

/// Indices of the `k` nearest points of every point (self included), ordered
/// by distance with ties broken by index. Returned flat, `n * k` long.
pub fn knn(coords: &Mat, k: usize) -> Vec<usize> {
    let n = coords.nrows();
    let k = k.min(n);
    let mut out = Vec::with_capacity(n * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        let pi = coords.row(i);
        for j in 0..n {
            let pj = coords.row(j);
            let d: f64 = (0..3).map(|c| (pi[c] - pj[c]).powi(2)).sum();
            order.push((d, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        order[..k].sort_unstable_by(cmp);
        out.extend(order[..k].iter().map(|&(_, j)| j));
    }
    out
}

/// `p_i - p_j` for every gathered neighbor pair, `(n*k) x 3`.
fn relative_positions(coords: &Mat, neighbors: &[usize], k: usize) -> Mat {
    let mut rel = Mat::zeros((neighbors.len(), 3));
    for (r, &j) in neighbors.iter().enumerate() {
        let i = r / k;
        for c in 0..3 {
            rel[[r, c]] = coords[[i, c]] - coords[[j, c]];
        }
    }
    rel
}

#[derive(Clone, Debug)]
struct PointNetBackbone {
    mlp1: Linear,
    mlp2: Linear,
    edge: Linear,
    fuse: Linear,
}

#[derive(Clone, Debug)]
struct LocalAttentionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    pos1: Linear,
    pos2: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct PointTransformerBackbone {
    embed: Linear,
    blocks: Vec<LocalAttentionBlock>,
    fuse: Linear,
}

#[derive(Clone, Debug)]
enum Backbone {
    PointNet(PointNetBackbone),
    PointTransformer(PointTransformerBackbone),
}

/// Point backbone followed by two fully-connected layers with a ReLU between.
/// Emits one feature row per point.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    backbone: Backbone,
    pub kind: BackboneKind,
    pub width: usize,
    pub neighbors: usize,
    pub n_points: usize,
    pub head1: Linear,
    pub head2: Linear,
}

impl PointEncoder {
    pub fn new(kind: BackboneKind, n_points: usize, width: usize, neighbors: usize, dim: usize) -> Self {
        let p = "points.backbone";
        let backbone = match kind {
            BackboneKind::PointNet => Backbone::PointNet(PointNetBackbone {
                mlp1: Linear::new(&format!("{p}.mlp1"), 3, width),
                mlp2: Linear::new(&format!("{p}.mlp2"), width, width),
                edge: Linear::new(&format!("{p}.edge"), width + 3, width),
                fuse: Linear::new(&format!("{p}.fuse"), 3 * width, width),
            }),
            BackboneKind::PointTransformer => Backbone::PointTransformer(PointTransformerBackbone {
                embed: Linear::new(&format!("{p}.embed"), 3, width),
                blocks: (0..2)
                    .map(|i| {
                        let b = format!("{p}.blocks.{i}");
                        LocalAttentionBlock {
                            q: Linear::new(&format!("{b}.q"), width, width),
                            k: Linear::new(&format!("{b}.k"), width, width),
                            v: Linear::new(&format!("{b}.v"), width, width),
                            pos1: Linear::new(&format!("{b}.pos1"), 3, width),
                            pos2: Linear::new(&format!("{b}.pos2"), width, width),
                            out: Linear::new(&format!("{b}.out"), width, width),
                        }
                    })
                    .collect(),
                fuse: Linear::new(&format!("{p}.fuse"), 2 * width, width),
            }),
        };
        PointEncoder {
            backbone,
            kind,
            width,
            neighbors,
            n_points,
            head1: Linear::new("points.head.fc1", width, dim),
            head2: Linear::new("points.head.fc2", dim, dim),
        }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        match &self.backbone {
            Backbone::PointNet(b) => {
                for l in [&b.mlp1, &b.mlp2, &b.edge, &b.fuse] {
                    l.declare(out);
                }
            }
            Backbone::PointTransformer(b) => {
                b.embed.declare(out);
                for blk in &b.blocks {
                    for l in [&blk.q, &blk.k, &blk.v, &blk.pos1, &blk.pos2, &blk.out] {
                        l.declare(out);
                    }
                }
                b.fuse.declare(out);
            }
        }
        self.head1.declare(out);
        self.head2.declare(out);
    }

    /// `F^P`, shape `N_P x D`.
    pub fn forward(&self, g: &mut Graph, pc: &PointCloud) -> Result<Var> {
        let n = pc.n_points();
        if n != self.n_points {
            return Err(Error::Config(format!(
                "point encoder configured for {} points, got {n}",
                self.n_points
            )));
        }
        let k = self.neighbors.min(n);
        let neighbors = knn(&pc.coords, k);
        let rel = relative_positions(&pc.coords, &neighbors, k);
        let coords = g.constant(pc.coords.clone());
        let feats = match &self.backbone {
            Backbone::PointNet(b) => {
                let h = b.mlp1.forward(g, coords);
                let h = g.relu(h);
                let h = b.mlp2.forward(g, h);
                let h = g.relu(h);
                let hj = g.gather_rows(h, neighbors.clone());
                let relv = g.constant(rel);
                let edge_in = g.concat_cols(&[hj, relv]);
                let e = b.edge.forward(g, edge_in);
                let e = g.relu(e);
                let local = g.group_max(e, k);
                let global = g.group_max(local, n);
                let global = g.broadcast_rows(global, n);
                let cat = g.concat_cols(&[h, local, global]);
                let f = b.fuse.forward(g, cat);
                g.relu(f)
            }
            Backbone::PointTransformer(b) => {
                let x0 = b.embed.forward(g, coords);
                let mut x = g.relu(x0);
                let relv = g.constant(rel);
                let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
                let scale = 1.0 / (self.width as f64).sqrt();
                for blk in &b.blocks {
                    let q = blk.q.forward(g, x);
                    let kk = blk.k.forward(g, x);
                    let v = blk.v.forward(g, x);
                    let d = blk.pos1.forward(g, relv);
                    let d = g.relu(d);
                    let delta = blk.pos2.forward(g, d);
                    let kj = g.gather_rows(kk, neighbors.clone());
                    let kj = g.add(kj, delta);
                    let vj = g.gather_rows(v, neighbors.clone());
                    let vj = g.add(vj, delta);
                    let qi = g.gather_rows(q, centers.clone());
                    let logits = g.row_dot(qi, kj);
                    let logits = g.scale(logits, scale);
                    let logits = g.reshape(logits, n, k);
                    let w = g.softmax_rows(logits, None);
                    let y = g.group_weighted_sum(w, vj);
                    let y = blk.out.forward(g, y);
                    x = g.add(x, y);
                }
                let global = g.group_max(x, n);
                let global = g.broadcast_rows(global, n);
                let cat = g.concat_cols(&[x, global]);
                let f = b.fuse.forward(g, cat);
                g.relu(f)
            }
        };
        let h = self.head1.forward(g, feats);
        let h = g.relu(h);
        Ok(self.head2.forward(g, h))
    }

    pub fn embed(&self, store: &ParamStore, pc: &PointCloud) -> Result<FeatureMap> {
        let mut g = Graph::with_params(store);
        let out = self.forward(&mut g, pc)?;
        Ok(FeatureMap::dense(g.value(out).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::init_params;
    use crate::text::HashEmbeddingProvider;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_for(decl: impl Fn(&mut Vec<ParamDecl>), seed: u64) -> ParamStore {
        let mut d = Vec::new();
        decl(&mut d);
        init_params(&d, seed)
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(Mat::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn pool_examples() {
        let f = FeatureMap::dense(array![[2.0, 3.0], [2.0, 3.0]]);
        assert_eq!(pool(&f).unwrap(), array![2.0, 3.0]);
        let f = FeatureMap::dense(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(pool(&f).unwrap(), array![0.5, 0.5]);
        let padded = FeatureMap::new(array![[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]], vec![true, true, false]).unwrap();
        assert_eq!(pool(&padded).unwrap(), array![0.5, 0.5]);
        let none = FeatureMap::new(array![[1.0]], vec![false]).unwrap();
        assert!(matches!(pool(&none), Err(Error::Empty(_))));
    }

    #[test]
    fn text_encoder_shapes_and_determinism() {
        let provider = HashEmbeddingProvider::new(1024, 12, 16, 0);
        let enc = TextEncoder::new(12, 16, 16, 2, 2, 32).unwrap();
        let store = store_for(|d| enc.declare(d), 1);
        let q = provider.tokenize("a tall hexagonal column");
        let a = enc.embed(&store, &provider, &q).unwrap();
        let b = enc.embed(&store, &provider, &q).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.dim(), (q.len(), 16));
        let empty = enc.embed(&store, &provider, &provider.tokenize("")).unwrap();
        assert_eq!(empty.len(), 1);
        assert!(empty.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sequence_length_over_max_is_config_error() {
        let enc = SequenceEncoder::new(4, 8, 1, 2, 16).unwrap();
        let store = store_for(|d| enc.declare(d), 0);
        let seq = CadSequence::new(vec![[1, 1]; 5], 10).unwrap();
        assert!(matches!(enc.embed(&store, &seq), Err(Error::Config(_))));
    }

    #[test]
    fn knn_includes_self_first() {
        let pc = random_cloud(20, 4);
        let nn = knn(&pc.coords, 5);
        assert_eq!(nn.len(), 100);
        for i in 0..20 {
            assert_eq!(nn[i * 5], i);
        }
    }

    #[test]
    fn point_count_mismatch_is_config_error() {
        let enc = PointEncoder::new(BackboneKind::PointNet, 16, 8, 4, 8);
        let store = store_for(|d| enc.declare(d), 0);
        assert!(matches!(
            enc.embed(&store, &random_cloud(12, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degenerate_cloud_is_finite() {
        for kind in [BackboneKind::PointNet, BackboneKind::PointTransformer] {
            let enc = PointEncoder::new(kind, 32, 8, 8, 16);
            let store = store_for(|d| enc.declare(d), 3);
            let pc = PointCloud::new(Mat::zeros((32, 3))).unwrap();
            let f = enc.embed(&store, &pc).unwrap();
            assert_eq!(f.values.dim(), (32, 16));
            assert!(f.values.iter().all(|v| v.is_finite()));
        }
    }
}
