//! Forward and backward passes of the encoder, the message-passing layers
//! and the heads, over one sampled batch.
//!
//! All local nodes of a batch live in one `N x d` matrix; node type `t`
//! occupies rows `offsets[t]..offsets[t + 1]`. Every sampled link carries a
//! message in both directions: the center receives from the neighbor through
//! the link's edge type, the neighbor receives from the center through the
//! reverse edge type.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::Params;
use super::{Activation, Aggregation, HeadType, ModelConfig};
use crate::db::Timestamp;
use crate::features::TableEncoder;
use crate::graph::{Direction, EdgeTypeId, HeteroTemporalGraph, NodeType};
use crate::rng::{fnv1a, rng_for};
use crate::sampler::SampledSubgraph;

pub const TIME_BUCKETS: usize = 16;

/// Log-scale bucket of the age `seed - node`: `floor(log2(1 + hours))`,
/// capped at `TIME_BUCKETS - 1`.
pub fn time_bucket(seed: Timestamp, node: Timestamp) -> usize {
    let hours = (seed.0 - node.0).max(0) as f64 / 3600.0;
    ((1.0 + hours).log2().floor() as usize).min(TIME_BUCKETS - 1)
}

/// Dense encoded features per node type.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub encoders: Vec<TableEncoder>,
    pub matrices: Vec<Array2<f64>>,
}

impl FeatureStore {
    /// Fits each type's encoder on nodes that are untimed or older than
    /// `cutoff`, then encodes every node.
    pub fn build(g: &HeteroTemporalGraph, cutoff: Option<Timestamp>) -> FeatureStore {
        let mut encoders = Vec::new();
        let mut matrices = Vec::new();
        for (t, table) in g.features.iter().enumerate() {
            let rows: Vec<usize> = (0..table.num_rows)
                .filter(|&i| match (cutoff, g.node_times[t][i]) {
                    (Some(c), Some(nt)) => nt < c,
                    _ => true,
                })
                .collect();
            let enc = if rows.is_empty() || rows.len() == table.num_rows {
                TableEncoder::fit(table)
            } else {
                TableEncoder::fit(&table.subset(&rows))
            };
            matrices.push(enc.encode(table));
            encoders.push(enc);
        }
        FeatureStore { encoders, matrices }
    }

    pub fn width(&self, t: usize) -> usize {
        self.matrices[t].ncols()
    }
}

/// Parameter-name fragment of an edge type: `src.fkey.dst.fwd|rev`.
pub fn edge_key(g: &HeteroTemporalGraph, et: EdgeTypeId) -> String {
    let e = g.edge_type(et);
    let dir = match e.direction {
        Direction::Forward => "fwd",
        Direction::Reverse => "rev",
    };
    format!(
        "{}.{}.{}.{dir}",
        g.type_name(e.src_type),
        e.fkey_column,
        g.type_name(e.dst_type)
    )
}

/// Static shapes of a model over one graph schema.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub type_names: Vec<String>,
    pub feat_dims: Vec<usize>,
    pub edge_keys: Vec<String>,
    /// Receiver node type of each edge type (its source type).
    pub edge_src: Vec<usize>,
}

/// Messages received through one edge type.
#[derive(Debug, Clone, Default)]
pub struct Recv {
    /// Batch rows of the distinct receivers.
    pub receivers: Vec<usize>,
    /// `(receiver position, sender row, coefficient)`.
    pub pairs: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub offsets: Vec<usize>,
    pub x: Vec<Array2<f64>>,
    pub recv: Vec<Recv>,
    /// Row of each root's seed node.
    pub seed_rows: Vec<usize>,
    pub num_rows: usize,
}

#[derive(Debug, Clone)]
pub struct Forward {
    enc_u: Vec<Array2<f64>>,
    enc_v: Vec<Array2<f64>>,
    /// `h[0]` is the encoder output, `h[l + 1]` the output of layer `l`.
    pub h: Vec<Array2<f64>>,
    z: Vec<Array2<f64>>,
    agg: Vec<Vec<Array2<f64>>>,
}

impl Forward {
    pub fn output(&self) -> &Array2<f64> {
        self.h.last().expect("at least the encoder output")
    }
}

/// What a batch is trained on.
#[derive(Debug, Clone)]
pub enum BatchTask {
    /// One target per root; roots are the entities.
    Entity { classification: bool, targets: Vec<f64> },
    /// `(source root, positive root, negative root)` triples.
    TwoTower { triples: Vec<(usize, usize, usize)> },
    /// Per root, the true destination indices; candidates are the
    /// destination-type nodes of each root's subgraph.
    IdGnn { dst_type: NodeType, truth: Vec<Vec<usize>> },
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub grads: Params,
    /// Loss terms averaged over.
    pub terms: usize,
    /// Roots skipped because their subgraph holds no candidate.
    pub skipped: usize,
    /// Roots with a non-empty truth none of which is in the subgraph.
    pub unreachable: usize,
    /// Hash of every ReLU and L1 branch taken; equal signatures mean the
    /// loss is smooth between the two parameter points.
    pub signature: u64,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn add_bias(mut m: Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    m += &b.row(0);
    m
}

fn col_sum(m: &Array2<f64>) -> Array2<f64> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

struct Signature(u64);

impl Signature {
    fn new() -> Self {
        Signature(0xcbf2_9ce4_8422_2325)
    }

    fn signs(&mut self, m: &Array2<f64>) {
        for v in m.iter() {
            self.0 ^= u64::from(*v > 0.0) + 1;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn diffs(&mut self, a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            self.0 ^= match x.partial_cmp(y) {
                Some(std::cmp::Ordering::Greater) => 3,
                Some(std::cmp::Ordering::Less) => 1,
                _ => 2,
            };
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Mean binary cross-entropy on logits, and its gradient.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            (sigmoid(x) - y) / n
        })
        .collect();
    (loss / n, grad)
}

/// Mean absolute error and its (sub)gradient; zero at the kink.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

/// Mean BPR loss `-ln sigmoid(pos - neg)` and its gradients.
pub fn bpr(pos: &[f64], neg: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = pos.len().max(1) as f64;
    let mut loss = 0.0;
    let mut dpos = Vec::with_capacity(pos.len());
    for (&p, &q) in pos.iter().zip(neg) {
        let d = p - q;
        loss += softplus(-d);
        dpos.push(-sigmoid(-d) / n);
    }
    let dneg = dpos.iter().map(|g| -g).collect();
    (loss / n, dpos, dneg)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Network {
    pub fn new(cfg: &ModelConfig, g: &HeteroTemporalGraph, store: &FeatureStore) -> Network {
        Network {
            cfg: cfg.clone(),
            type_names: g.node_types.clone(),
            feat_dims: (0..g.num_node_types()).map(|t| store.width(t)).collect(),
            edge_keys: g.edge_type_ids().map(|et| edge_key(g, et)).collect(),
            edge_src: g.edge_types.iter().map(|e| e.src_type.0).collect(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.cfg.encoder.hidden_dim
    }

    pub fn in_dim(&self, t: usize) -> usize {
        self.feat_dims[t] + if self.cfg.encoder.time_embedding { TIME_BUCKETS } else { 0 }
    }

    fn uses_mlp(&self) -> bool {
        matches!(self.cfg.head.head_type, HeadType::MlpEntity | HeadType::Idgnn)
    }

    /// Fresh parameters, uniform in `±1/sqrt(fan_in)`.
    pub fn init_params(&self, seed: u64) -> Params {
        let d = self.hidden();
        let mut rng = rng_for(seed, "model/init");
        let mut p = Params::default();
        for (t, name) in self.type_names.iter().enumerate() {
            let i = self.in_dim(t);
            p.add_uniform(&mut rng, format!("enc.{name}.in.w"), i, d, i);
            p.add_uniform(&mut rng, format!("enc.{name}.in.b"), 1, d, i);
            p.add_uniform(&mut rng, format!("enc.{name}.res.w"), d, d, d);
            p.add_uniform(&mut rng, format!("enc.{name}.res.b"), 1, d, d);
        }
        for l in 0..self.cfg.gnn.num_layers {
            for name in &self.type_names {
                p.add_uniform(&mut rng, format!("gnn.{l}.self.{name}.w"), d, d, d);
                p.add_uniform(&mut rng, format!("gnn.{l}.self.{name}.b"), 1, d, d);
            }
            for key in &self.edge_keys {
                p.add_uniform(&mut rng, format!("gnn.{l}.edge.{key}.w"), d, d, d);
            }
        }
        if self.uses_mlp() {
            p.add_uniform(&mut rng, "head.mlp.w1".into(), d, d, d);
            p.add_uniform(&mut rng, "head.mlp.b1".into(), 1, d, d);
            p.add_uniform(&mut rng, "head.mlp.w2".into(), d, 1, d);
            p.add_uniform(&mut rng, "head.mlp.b2".into(), 1, 1, d);
        }
        match self.cfg.head.head_type {
            HeadType::Idgnn => p.add_uniform(&mut rng, "head.id_emb".into(), 1, d, d),
            HeadType::TwoTower => {
                p.add_uniform(&mut rng, "head.src.w".into(), d, d, d);
                p.add_uniform(&mut rng, "head.dst.w".into(), d, d, d);
            }
            HeadType::MlpEntity => {}
        }
        p
    }

    /// Assembles encoder inputs and message lists for a sampled batch.
    pub fn batch(&self, g: &HeteroTemporalGraph, store: &FeatureStore, sg: &SampledSubgraph) -> Batch {
        let n_types = self.type_names.len();
        let mut offsets = vec![0; n_types + 1];
        for t in 0..n_types {
            offsets[t + 1] = offsets[t] + sg.local_nodes[t].len();
        }
        let time = self.cfg.encoder.time_embedding;
        let x = (0..n_types)
            .map(|t| {
                let nodes = &sg.local_nodes[t];
                let fd = self.feat_dims[t];
                let mut x = Array2::zeros((nodes.len(), self.in_dim(t)));
                for (i, &node) in nodes.iter().enumerate() {
                    if !self.cfg.encoder.feature_mask {
                        x.slice_mut(s![i, ..fd]).assign(&store.matrices[t].row(node));
                    }
                    if time {
                        if let Some(nt) = g.node_times[t][node] {
                            let b = time_bucket(sg.seed_time_of(NodeType(t), i), nt);
                            x[[i, fd + b]] = 1.0;
                        }
                    }
                }
                x
            })
            .collect();

        let mut raw: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.edge_keys.len()];
        for (e, links) in sg.local_edges.iter().enumerate() {
            let et = g.edge_type(EdgeTypeId(e));
            let rev = EdgeTypeId(e).reverse().0;
            for &(c, n) in links {
                let rc = offsets[et.src_type.0] + c;
                let rn = offsets[et.dst_type.0] + n;
                raw[e].push((rc, rn));
                raw[rev].push((rn, rc));
            }
        }
        let mean = self.cfg.gnn.aggregation == Aggregation::Mean;
        let recv = raw
            .into_iter()
            .map(|mut pairs| {
                pairs.sort_unstable();
                let mut r = Recv::default();
                let mut start = 0;
                while start < pairs.len() {
                    let receiver = pairs[start].0;
                    let end = start + pairs[start..].iter().take_while(|p| p.0 == receiver).count();
                    let coef = if mean { 1.0 / (end - start) as f64 } else { 1.0 };
                    let pos = r.receivers.len();
                    r.receivers.push(receiver);
                    r.pairs.extend(pairs[start..end].iter().map(|&(_, sender)| (pos, sender, coef)));
                    start = end;
                }
                r
            })
            .collect();
        let seed_rows = sg
            .seed_refs
            .iter()
            .zip(&sg.seed_local)
            .map(|(n, &l)| offsets[n.node_type.0] + l)
            .collect();
        Batch {
            num_rows: offsets[n_types],
            offsets,
            x,
            recv,
            seed_rows,
        }
    }

    pub fn forward(&self, p: &Params, b: &Batch) -> Forward {
        let d = self.hidden();
        let mut h0 = Array2::zeros((b.num_rows, d));
        let mut enc_u = Vec::new();
        let mut enc_v = Vec::new();
        for (t, name) in self.type_names.iter().enumerate() {
            let u = add_bias(b.x[t].dot(p.get(&format!("enc.{name}.in.w"))), p.get(&format!("enc.{name}.in.b")));
            let v = add_bias(u.dot(p.get(&format!("enc.{name}.res.w"))), p.get(&format!("enc.{name}.res.b")));
            h0.slice_mut(s![b.offsets[t]..b.offsets[t + 1], ..]).assign(&(&u + &relu(&v)));
            enc_u.push(u);
            enc_v.push(v);
        }
        if self.cfg.head.head_type == HeadType::Idgnn {
            let id = p.get("head.id_emb");
            for &r in &b.seed_rows {
                let mut row = h0.row_mut(r);
                row += &id.row(0);
            }
        }
        let mut h = vec![h0];
        let mut z_all = Vec::new();
        let mut agg_all = Vec::new();
        for l in 0..self.cfg.gnn.num_layers {
            let hl = &h[l];
            let mut z = Array2::zeros((b.num_rows, d));
            for (t, name) in self.type_names.iter().enumerate() {
                let rows = s![b.offsets[t]..b.offsets[t + 1], ..];
                let out = add_bias(
                    hl.slice(rows).dot(p.get(&format!("gnn.{l}.self.{name}.w"))),
                    p.get(&format!("gnn.{l}.self.{name}.b")),
                );
                z.slice_mut(rows).assign(&out);
            }
            let mut aggs = Vec::with_capacity(b.recv.len());
            for (e, r) in b.recv.iter().enumerate() {
                let mut a = Array2::zeros((r.receivers.len(), d));
                for &(pos, sender, coef) in &r.pairs {
                    a.row_mut(pos).scaled_add(coef, &hl.row(sender));
                }
                if !r.receivers.is_empty() {
                    let m = a.dot(p.get(&format!("gnn.{l}.edge.{}.w", self.edge_keys[e])));
                    for (pos, &row) in r.receivers.iter().enumerate() {
                        let mut zr = z.row_mut(row);
                        zr += &m.row(pos);
                    }
                }
                aggs.push(a);
            }
            let next = match self.cfg.gnn.activation {
                Activation::Relu => relu(&z),
                Activation::Linear => z.clone(),
            };
            z_all.push(z);
            agg_all.push(aggs);
            h.push(next);
        }
        Forward {
            enc_u,
            enc_v,
            h,
            z: z_all,
            agg: agg_all,
        }
    }

    /// Back-propagates `d_out` (gradient w.r.t. the final node states) into
    /// `grads`.
    pub fn backward(&self, p: &Params, b: &Batch, f: &Forward, d_out: Array2<f64>, grads: &mut Params) {
        let mut dh = d_out;
        for l in (0..self.cfg.gnn.num_layers).rev() {
            let z = &f.z[l];
            let dz = match self.cfg.gnn.activation {
                Activation::Relu => {
                    let mut dz = dh;
                    ndarray::Zip::from(&mut dz).and(z).for_each(|g, &zv| {
                        if zv <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    dz
                }
                Activation::Linear => dh,
            };
            let hl = &f.h[l];
            let mut dprev = Array2::zeros(hl.raw_dim());
            for (t, name) in self.type_names.iter().enumerate() {
                let rows = s![b.offsets[t]..b.offsets[t + 1], ..];
                let dzr = dz.slice(rows);
                let w = format!("gnn.{l}.self.{name}.w");
                grads.accumulate(&w, &hl.slice(rows).t().dot(&dzr));
                grads.accumulate(&format!("gnn.{l}.self.{name}.b"), &col_sum(&dzr.to_owned()));
                dprev.slice_mut(rows).assign(&dzr.dot(&p.get(&w).t()));
            }
            for (e, r) in b.recv.iter().enumerate() {
                if r.receivers.is_empty() {
                    continue;
                }
                let w = format!("gnn.{l}.edge.{}.w", self.edge_keys[e]);
                let dzr = dz.select(Axis(0), &r.receivers);
                grads.accumulate(&w, &f.agg[l][e].t().dot(&dzr));
                let da = dzr.dot(&p.get(&w).t());
                for &(pos, sender, coef) in &r.pairs {
                    dprev.row_mut(sender).scaled_add(coef, &da.row(pos));
                }
            }
            dh = dprev;
        }
        if self.cfg.head.head_type == HeadType::Idgnn {
            let mut g = Array2::zeros((1, self.hidden()));
            for &r in &b.seed_rows {
                let mut row = g.row_mut(0);
                row += &dh.row(r);
            }
            grads.accumulate("head.id_emb", &g);
        }
        for (t, name) in self.type_names.iter().enumerate() {
            let dh0 = dh.slice(s![b.offsets[t]..b.offsets[t + 1], ..]);
            let u = &f.enc_u[t];
            let v = &f.enc_v[t];
            let mut dv = dh0.to_owned();
            ndarray::Zip::from(&mut dv).and(v).for_each(|g, &vv| {
                if vv <= 0.0 {
                    *g = 0.0;
                }
            });
            let wres = format!("enc.{name}.res.w");
            grads.accumulate(&wres, &u.t().dot(&dv));
            grads.accumulate(&format!("enc.{name}.res.b"), &col_sum(&dv));
            let du = &dh0 + &dv.dot(&p.get(&wres).t());
            grads.accumulate(&format!("enc.{name}.in.w"), &b.x[t].t().dot(&du));
            grads.accumulate(&format!("enc.{name}.in.b"), &col_sum(&du));
        }
    }

    fn signature_of(&self, f: &Forward, sig: &mut Signature) {
        for v in &f.enc_v {
            sig.signs(v);
        }
        if self.cfg.gnn.activation == Activation::Relu {
            for z in &f.z {
                sig.signs(z);
            }
        }
    }

    /// MLP head scores for the rows of `e`, with the hidden pre-activation.
    pub fn mlp_scores(&self, p: &Params, e: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let a = add_bias(e.dot(p.get("head.mlp.w1")), p.get("head.mlp.b1"));
        let y = add_bias(relu(&a).dot(p.get("head.mlp.w2")), p.get("head.mlp.b2"));
        (y.column(0).to_vec(), a)
    }

    fn mlp_backward(&self, p: &Params, e: ArrayView2<f64>, a: &Array2<f64>, dy: &[f64], grads: &mut Params) -> Array2<f64> {
        let dy = Array2::from_shape_vec((dy.len(), 1), dy.to_vec()).expect("column");
        let r = relu(a);
        grads.accumulate("head.mlp.w2", &r.t().dot(&dy));
        grads.accumulate("head.mlp.b2", &col_sum(&dy));
        let mut da = dy.dot(&p.get("head.mlp.w2").t());
        ndarray::Zip::from(&mut da).and(a).for_each(|g, &av| {
            if av <= 0.0 {
                *g = 0.0;
            }
        });
        grads.accumulate("head.mlp.w1", &e.t().dot(&da));
        grads.accumulate("head.mlp.b1", &col_sum(&da));
        da.dot(&p.get("head.mlp.w1").t())
    }

    /// Two-tower projections of embedding rows.
    pub fn tower(&self, p: &Params, e: ArrayView2<f64>, src: bool) -> Array2<f64> {
        e.dot(p.get(if src { "head.src.w" } else { "head.dst.w" }))
    }

    /// Destination-type candidates of each root: `(row, global index)`.
    pub fn candidates(sg: &SampledSubgraph, b: &Batch, dst_type: NodeType) -> Vec<Vec<(usize, usize)>> {
        let t = dst_type.0;
        let mut out = vec![Vec::new(); sg.num_roots()];
        for (i, (&root, &global)) in sg.node_root[t].iter().zip(&sg.local_nodes[t]).enumerate() {
            let row = b.offsets[t] + i;
            if row != b.seed_rows[root] {
                out[root].push((row, global));
            }
        }
        out
    }

    /// Loss and parameter gradients of one batch.
    pub fn loss(&self, p: &Params, sg: &SampledSubgraph, b: &Batch, task: &BatchTask) -> LossEval {
        let f = self.forward(p, b);
        let hl = f.output();
        let mut grads = p.zeros_like();
        let mut sig = Signature::new();
        self.signature_of(&f, &mut sig);
        let mut d_out = Array2::zeros(hl.raw_dim());
        let (mut skipped, mut unreachable) = (0, 0);
        let (loss, terms) = match task {
            BatchTask::Entity { classification, targets } => {
                let e = hl.select(Axis(0), &b.seed_rows);
                let (y, a) = self.mlp_scores(p, e.view());
                sig.signs(&a);
                let (loss, dy) = if *classification {
                    bce_with_logits(&y, targets)
                } else {
                    sig.diffs(&y, targets);
                    l1_loss(&y, targets)
                };
                let de = self.mlp_backward(p, e.view(), &a, &dy, &mut grads);
                for (i, &r) in b.seed_rows.iter().enumerate() {
                    d_out.row_mut(r).scaled_add(1.0, &de.row(i));
                }
                (loss, y.len())
            }
            BatchTask::TwoTower { triples } => {
                let rows = |k: usize| -> Vec<usize> { triples.iter().map(|t| b.seed_rows[[t.0, t.1, t.2][k]]).collect() };
                let (rs, rp, rq) = (rows(0), rows(1), rows(2));
                let (es, ep, eq) = (hl.select(Axis(0), &rs), hl.select(Axis(0), &rp), hl.select(Axis(0), &rq));
                let (ws, wd) = (p.get("head.src.w"), p.get("head.dst.w"));
                let (su, pv, qv) = (es.dot(ws), ep.dot(wd), eq.dot(wd));
                let pos: Vec<f64> = (&su * &pv).sum_axis(Axis(1)).to_vec();
                let neg: Vec<f64> = (&su * &qv).sum_axis(Axis(1)).to_vec();
                let (loss, dpos, dneg) = bpr(&pos, &neg);
                let dpos_c = Array2::from_shape_vec((dpos.len(), 1), dpos).expect("column");
                let dneg_c = Array2::from_shape_vec((dneg.len(), 1), dneg).expect("column");
                let dsu = &pv * &dpos_c + &qv * &dneg_c;
                let dp = &su * &dpos_c;
                let dq = &su * &dneg_c;
                grads.accumulate("head.src.w", &es.t().dot(&dsu));
                grads.accumulate("head.dst.w", &(ep.t().dot(&dp) + eq.t().dot(&dq)));
                let (des, dep, deq) = (dsu.dot(&ws.t()), dp.dot(&wd.t()), dq.dot(&wd.t()));
                for (i, ((&a, &bb), &c)) in rs.iter().zip(&rp).zip(&rq).enumerate() {
                    d_out.row_mut(a).scaled_add(1.0, &des.row(i));
                    d_out.row_mut(bb).scaled_add(1.0, &dep.row(i));
                    d_out.row_mut(c).scaled_add(1.0, &deq.row(i));
                }
                (loss, triples.len())
            }
            BatchTask::IdGnn { dst_type, truth } => {
                let cands = Self::candidates(sg, b, *dst_type);
                let mut rows = Vec::new();
                let mut labels = Vec::new();
                for (root, c) in cands.iter().enumerate() {
                    if c.is_empty() {
                        skipped += 1;
                        continue;
                    }
                    let t = &truth[root];
                    let mut hit = false;
                    for &(row, global) in c {
                        rows.push(row);
                        let y = t.binary_search(&global).is_ok();
                        hit |= y;
                        labels.push(if y { 1.0 } else { 0.0 });
                    }
                    if !hit && !t.is_empty() {
                        unreachable += 1;
                    }
                }
                if rows.is_empty() {
                    (0.0, 0)
                } else {
                    let e = hl.select(Axis(0), &rows);
                    let (y, a) = self.mlp_scores(p, e.view());
                    sig.signs(&a);
                    let (loss, dy) = bce_with_logits(&y, &labels);
                    let de = self.mlp_backward(p, e.view(), &a, &dy, &mut grads);
                    for (i, &r) in rows.iter().enumerate() {
                        d_out.row_mut(r).scaled_add(1.0, &de.row(i));
                    }
                    (loss, rows.len())
                }
            }
        };
        self.backward(p, b, &f, d_out, &mut grads);
        LossEval {
            loss,
            grads,
            terms,
            skipped,
            unreachable,
            signature: sig.0 ^ fnv1a(&(terms as u64).to_le_bytes()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Csr, EdgePolicy, EdgeType};
    use crate::features::FeatureTable;
    use crate::model::{GnnConfig, ModelConfig};
    use crate::task::TaskType;
    use ndarray::array;

    /// Two node types `a` and `b`, one link `a0 -> b0`.
    fn tiny() -> HeteroTemporalGraph {
        HeteroTemporalGraph {
            node_types: vec!["a".into(), "b".into()],
            node_counts: vec![1, 1],
            node_times: vec![vec![None], vec![None]],
            edge_types: vec![
                EdgeType {
                    src_type: NodeType(0),
                    fkey_column: "b_id".into(),
                    dst_type: NodeType(1),
                    direction: Direction::Forward,
                },
                EdgeType {
                    src_type: NodeType(1),
                    fkey_column: "b_id".into(),
                    dst_type: NodeType(0),
                    direction: Direction::Reverse,
                },
            ],
            adjacency: vec![Csr::from_pairs(1, &[(0, 0)]), Csr::from_pairs(1, &[(0, 0)])],
            features: vec![FeatureTable { num_rows: 1, columns: vec![] }; 2],
            policy: EdgePolicy::Normal,
        }
    }

    #[test]
    fn single_edge_linear_message_passing() {
        let g = tiny();
        let mut cfg = ModelConfig::for_task(TaskType::EntityClassification);
        cfg.encoder.hidden_dim = 2;
        cfg.encoder.time_embedding = false;
        cfg.gnn = GnnConfig {
            num_layers: 1,
            activation: Activation::Linear,
            ..GnnConfig::default()
        };
        let store = FeatureStore::build(&g, None);
        let net = Network::new(&cfg, &g, &store);
        let mut p = net.init_params(0);
        for (k, v) in p.tensors.iter_mut() {
            v.fill(0.0);
            if k.ends_with(".w") && k.starts_with("gnn") {
                *v = Array2::eye(2);
            }
        }
        // encoder output: h_a = (1, 2), h_b = (3, 5) through the biases
        p.tensors.insert("enc.a.in.b".into(), array![[1.0, 2.0]]);
        p.tensors.insert("enc.b.in.b".into(), array![[3.0, 5.0]]);
        let sg = SampledSubgraph {
            seed_refs: vec![crate::graph::NodeRef::new(NodeType(0), 0)],
            seed_times: vec![Timestamp(0)],
            seed_local: vec![0],
            local_nodes: vec![vec![0], vec![0]],
            node_root: vec![vec![0], vec![0]],
            hop_of_node: vec![vec![0], vec![1]],
            seed_mask: vec![vec![true], vec![false]],
            local_edges: vec![vec![(0, 0)], vec![]],
        };
        let b = net.batch(&g, &store, &sg);
        let f = net.forward(&p, &b);
        assert_eq!(f.output(), &array![[4.0, 7.0], [4.0, 7.0]]);
    }

    #[test]
    fn loss_values() {
        let (l, g) = bce_with_logits(&[0.0], &[1.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] + 0.5).abs() < 1e-12);
        assert!(bce_with_logits(&[20.0, -20.0], &[1.0, 0.0]).0 < 1e-8);
        assert_eq!(l1_loss(&[1.0, 2.0], &[1.0, 2.0]).0, 0.0);
        assert!((bpr(&[1.0], &[1.0]).0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bpr(&[20.0], &[0.0]).0 < 1e-8);
        assert!((bpr(&[-20.0], &[0.0]).0 - 20.0).abs() < 1e-8);
    }

    #[test]
    fn buckets() {
        assert_eq!(time_bucket(Timestamp(0), Timestamp(0)), 0);
        assert_eq!(time_bucket(Timestamp(3600), Timestamp(0)), 1);
        assert_eq!(time_bucket(Timestamp(126 * 3600), Timestamp(0)), 6);
        assert_eq!(time_bucket(Timestamp(128 * 3600), Timestamp(0)), 7);
        assert_eq!(time_bucket(Timestamp(1_000_000), Timestamp(0)), 8);
        assert_eq!(time_bucket(Timestamp(i64::MAX / 2), Timestamp(0)), 15);
    }
}
