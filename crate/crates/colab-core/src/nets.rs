//! Encoder-decoder segmentation networks with an extendable classification
//! head. The segmenter and the label generator share this topology and
//! differ only in output channel count and seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{Graph, NetworkParams, NodeId, Tensor};
use crate::rng::SeedStream;

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of 2x downsampling stages.
    pub depth: usize,
    pub out_channels: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// A concrete network: config, parameter store, and a scope string that
/// prefixes parameter names so several networks can share one graph.
#[derive(Debug, Clone)]
pub struct SegNetwork {
    cfg: NetConfig,
    scope: String,
    pub params: NetworkParams,
}

fn conv_layers(cfg: &NetConfig) -> Vec<(String, ConvSpec)> {
    let w = |level: usize| cfg.base_width << level;
    let c3 = |i, o| ConvSpec { in_ch: i, out_ch: o, kernel: 3, stride: 1, pad: 1 };
    let mut layers = Vec::new();
    layers.push(("enc0.conv1".to_string(), c3(cfg.in_channels, w(0))));
    layers.push(("enc0.conv2".to_string(), c3(w(0), w(0))));
    for l in 1..=cfg.depth {
        layers.push((
            format!("down{l}"),
            ConvSpec { in_ch: w(l - 1), out_ch: w(l), kernel: 3, stride: 2, pad: 1 },
        ));
        layers.push((format!("enc{l}.conv1"), c3(w(l), w(l))));
        layers.push((format!("enc{l}.conv2"), c3(w(l), w(l))));
    }
    for l in (0..cfg.depth).rev() {
        layers.push((format!("dec{l}.conv1"), c3(w(l + 1) + w(l), w(l))));
        layers.push((format!("dec{l}.conv2"), c3(w(l), w(l))));
    }
    layers.push((
        "head".to_string(),
        ConvSpec { in_ch: w(0), out_ch: cfg.out_channels, kernel: 1, stride: 1, pad: 0 },
    ));
    layers
}

fn init_weight(spec: &ConvSpec, stream: &mut SeedStream) -> Tensor {
    let fan_in = (spec.in_ch * spec.kernel * spec.kernel) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let n = spec.out_ch * spec.in_ch * spec.kernel * spec.kernel;
    let data: Vec<f64> = (0..n).map(|_| stream.uniform_in(-bound, bound)).collect();
    Tensor::new(
        vec![spec.out_ch, spec.in_ch, spec.kernel, spec.kernel],
        data,
    )
    .unwrap()
    .with_grad()
}

/// Builds a network with deterministic initialization: uniform weights with
/// bound sqrt(6 / fan_in) from a per-parameter seed stream, zero biases.
pub fn build_net(cfg: &NetConfig, scope: &str) -> Result<SegNetwork> {
    if cfg.depth < 1 {
        return Err(Error::invalid(format!("depth must be >= 1, got {}", cfg.depth)));
    }
    if cfg.in_channels == 0 || cfg.base_width == 0 || cfg.out_channels == 0 {
        return Err(Error::invalid("channel counts and width must be positive"));
    }
    let mut params = NetworkParams::new();
    let init = SeedStream::new(cfg.seed).child("init");
    for (name, spec) in conv_layers(cfg) {
        let mut stream = init.clone().child(&name);
        params.insert(format!("{name}.w"), init_weight(&spec, &mut stream));
        params.insert(
            format!("{name}.b"),
            Tensor::zeros(vec![spec.out_ch]).with_grad(),
        );
    }
    Ok(SegNetwork {
        cfg: cfg.clone(),
        scope: scope.to_string(),
        params,
    })
}

impl SegNetwork {
    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn from_params(cfg: NetConfig, scope: &str, params: NetworkParams) -> Result<SegNetwork> {
        let expected: Vec<String> = conv_layers(&cfg)
            .iter()
            .flat_map(|(n, _)| [format!("{n}.w"), format!("{n}.b")])
            .collect();
        let have: Vec<String> = params.names().map(|s| s.to_string()).collect();
        let mut want = expected.clone();
        want.sort();
        if have != want {
            return Err(Error::invalid(format!(
                "parameter set does not match topology: have {have:?}, want {want:?}"
            )));
        }
        Ok(SegNetwork { cfg, scope: scope.to_string(), params })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    fn scoped(&self, name: &str) -> String {
        format!("{}.{}", self.scope, name)
    }

    /// Registers every parameter into the graph under this network's scope.
    pub fn register_params(
        &self,
        g: &mut Graph,
        trainable: bool,
    ) -> Result<BTreeMap<String, NodeId>> {
        let mut ids = BTreeMap::new();
        for (name, value) in self.params.iter() {
            let scoped = self.scoped(name);
            let id = g.param(&scoped, value.clone(), trainable)?;
            ids.insert(scoped, id);
        }
        Ok(ids)
    }

    /// Runs the topology against parameter nodes already in the graph
    /// (keyed by scoped name). Input must be [N, in_channels, H, W] with
    /// spatial dims divisible by 2^depth.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        input: NodeId,
        ids: &BTreeMap<String, NodeId>,
    ) -> Result<NodeId> {
        let shape = g.value(input).shape().to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(Error::invalid(format!(
                "expected batch [N,C,H,W], got {shape:?}"
            )));
        };
        if c != self.cfg.in_channels {
            return Err(Error::invalid(format!(
                "batch has {c} channels, network expects {}",
                self.cfg.in_channels
            )));
        }
        let div = 1usize << self.cfg.depth;
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(Error::invalid(format!(
                "spatial dims {h}x{w} not divisible into {} stages",
                self.cfg.depth
            )));
        }

        let node = |ids: &BTreeMap<String, NodeId>, name: &str| -> Result<NodeId> {
            ids.get(&self.scoped(name)).copied().ok_or_else(|| {
                Error::invalid(format!("parameter {name:?} missing from graph"))
            })
        };
        let conv =
            |g: &mut Graph, x: NodeId, name: &str, spec: ConvSpec| -> Result<NodeId> {
                let wn = node(ids, &format!("{name}.w"))?;
                let bn = node(ids, &format!("{name}.b"))?;
                let y = g.conv2d(x, wn, spec.stride, spec.pad)?;
                let y = g.bias_add(y, bn)?;
                g.name_node(y, &self.scoped(&format!("{name}.out")));
                Ok(y)
            };

        let specs: BTreeMap<String, ConvSpec> = conv_layers(&self.cfg).into_iter().collect();
        let spec = |name: &str| specs[name];

        let mut cur = {
            let y = conv(g, input, "enc0.conv1", spec("enc0.conv1"))?;
            let y = g.relu(y);
            let y = conv(g, y, "enc0.conv2", spec("enc0.conv2"))?;
            g.relu(y)
        };
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for l in 1..=self.cfg.depth {
            skips.push(cur);
            let y = conv(g, cur, &format!("down{l}"), spec(&format!("down{l}")))?;
            let y = g.relu(y);
            let y = conv(g, y, &format!("enc{l}.conv1"), spec(&format!("enc{l}.conv1")))?;
            let y = g.relu(y);
            let y = conv(g, y, &format!("enc{l}.conv2"), spec(&format!("enc{l}.conv2")))?;
            cur = g.relu(y);
        }
        for l in (0..self.cfg.depth).rev() {
            let up = g.upsample_nearest2(cur)?;
            let cat = g.concat_channels(&[up, skips[l]])?;
            let y = conv(g, cat, &format!("dec{l}.conv1"), spec(&format!("dec{l}.conv1")))?;
            let y = g.relu(y);
            let y = conv(g, y, &format!("dec{l}.conv2"), spec(&format!("dec{l}.conv2")))?;
            cur = g.relu(y);
        }
        let out = conv(g, cur, "head", spec("head"))?;
        g.name_node(out, &self.scoped("logits"));
        Ok(out)
    }

    /// Registers parameters and runs the forward pass in one call.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: NodeId,
        trainable: bool,
    ) -> Result<NodeId> {
        let ids = self.register_params(g, trainable)?;
        self.forward_with(g, input, &ids)
    }

    /// Plain inference: returns logits [N, out_channels, H, W]. Non-finite
    /// outputs are reported with the first offending layer.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.leaf(batch.clone());
        let out = self.forward_graph(&mut g, input, false)?;
        let value = g.value(out);
        if value.data().iter().any(|v| !v.is_finite()) {
            let at = g
                .first_nonfinite()
                .unwrap_or_else(|| "unknown node".to_string());
            return Err(Error::NonFinite(format!(
                "forward produced non-finite values, first at {at}"
            )));
        }
        Ok(value.clone())
    }

    /// Widens the final 1x1 conv from 2 to t+1 output channels. The original
    /// two channels' weights and biases are copied verbatim; new rows are
    /// initialized from a fresh seed stream with the standard scheme.
    pub fn extend_head(&self, t: usize) -> Result<SegNetwork> {
        if self.cfg.out_channels != 2 {
            return Err(Error::invalid(format!(
                "can only extend a 2-channel head, this one has {}",
                self.cfg.out_channels
            )));
        }
        if t < 2 {
            return Err(Error::invalid(format!("head extension needs t >= 2, got {t}")));
        }
        let new_out = t + 1;
        let w0 = self.cfg.base_width;
        let mut cfg = self.cfg.clone();
        cfg.out_channels = new_out;

        let old_w = self.params.get("head.w").expect("head.w exists");
        let old_b = self.params.get("head.b").expect("head.b exists");
        let mut stream = SeedStream::new(self.cfg.seed).child("extend").child("head");
        let spec = ConvSpec { in_ch: w0, out_ch: new_out, kernel: 1, stride: 1, pad: 0 };
        let fresh = init_weight(&spec, &mut stream);

        let mut wdata = vec![0.0; new_out * w0];
        wdata[..2 * w0].copy_from_slice(&old_w.data()[..2 * w0]);
        wdata[2 * w0..].copy_from_slice(&fresh.data()[2 * w0..]);
        let mut bdata = vec![0.0; new_out];
        bdata[..2].copy_from_slice(old_b.data());

        let mut params = self.params.clone_params();
        *params.get_mut("head.w").unwrap() =
            Tensor::new(vec![new_out, w0, 1, 1], wdata)?.with_grad();
        *params.get_mut("head.b").unwrap() = Tensor::new(vec![new_out], bdata)?.with_grad();
        Ok(SegNetwork { cfg, scope: self.scope.clone(), params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_batch(stream: &mut SeedStream, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let data: Vec<f64> = (0..n * c * h * w).map(|_| stream.uniform_in(-1.0, 1.0)).collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn shape_contract() {
        let cfg = NetConfig { in_channels: 1, base_width: 4, depth: 1, out_channels: 2, seed: 0 };
        let net = build_net(&cfg, "net").unwrap();
        let mut s = SeedStream::new(1);
        let out = net.forward(&rand_batch(&mut s, 2, 1, 16, 16)).unwrap();
        assert_eq!(out.shape(), &[2, 2, 16, 16]);
    }

    #[test]
    fn shape_contract_more_configs() {
        let mut s = SeedStream::new(2);
        for (ic, bw, d, oc, hw) in [(2usize, 3usize, 2usize, 4usize, 12usize), (1, 2, 3, 3, 16)] {
            let cfg = NetConfig {
                in_channels: ic,
                base_width: bw,
                depth: d,
                out_channels: oc,
                seed: 5,
            };
            let net = build_net(&cfg, "net").unwrap();
            let out = net.forward(&rand_batch(&mut s, 1, ic, hw, hw)).unwrap();
            assert_eq!(out.shape(), &[1, oc, hw, hw]);
        }
    }

    #[test]
    fn same_seed_identical_params() {
        let cfg = NetConfig { in_channels: 1, base_width: 4, depth: 2, out_channels: 2, seed: 9 };
        let a = build_net(&cfg, "net").unwrap();
        let b = build_net(&cfg, "net").unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(t.data(), b.params.get(name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn param_count_matches_hand_total() {
        let cfg = NetConfig { in_channels: 1, base_width: 8, depth: 2, out_channels: 3, seed: 0 };
        let net = build_net(&cfg, "net").unwrap();
        // widths 8 / 16 / 32; every 3x3 conv counts 9*ci*co + co
        let hand: usize = (9 * 1 * 8 + 8)      // enc0.conv1
            + (9 * 8 * 8 + 8)                  // enc0.conv2
            + (9 * 8 * 16 + 16)                // down1
            + (9 * 16 * 16 + 16) * 2           // enc1.conv1/2
            + (9 * 16 * 32 + 32)               // down2
            + (9 * 32 * 32 + 32) * 2           // enc2.conv1/2
            + (9 * 48 * 16 + 16)               // dec1.conv1 (32 up + 16 skip)
            + (9 * 16 * 16 + 16)               // dec1.conv2
            + (9 * 24 * 8 + 8)                 // dec0.conv1 (16 up + 8 skip)
            + (9 * 8 * 8 + 8)                  // dec0.conv2
            + (1 * 8 * 3 + 3); // head
        assert_eq!(net.param_count(), hand);
        assert_eq!(hand, 41203);
    }

    #[test]
    fn extend_preserves_original_channels() {
        let cfg = NetConfig { in_channels: 1, base_width: 4, depth: 1, out_channels: 2, seed: 3 };
        let base = build_net(&cfg, "net").unwrap();
        let ext = base.extend_head(3).unwrap();
        assert_eq!(ext.cfg().out_channels, 4);
        let mut s = SeedStream::new(4);
        let x = rand_batch(&mut s, 1, 1, 8, 8);
        let a = base.forward(&x).unwrap();
        let b = ext.forward(&x).unwrap();
        for ch in 0..2 {
            for y in 0..8 {
                for xx in 0..8 {
                    assert_eq!(a.data()[a.idx4(0, ch, y, xx)], b.data()[b.idx4(0, ch, y, xx)]);
                }
            }
        }
    }

    #[test]
    fn extend_t2_adds_one_channel() {
        let cfg = NetConfig { in_channels: 1, base_width: 2, depth: 1, out_channels: 2, seed: 0 };
        let net = build_net(&cfg, "net").unwrap().extend_head(2).unwrap();
        assert_eq!(net.cfg().out_channels, 3);
    }

    #[test]
    fn extend_rejects_small_t_and_wide_head() {
        let cfg = NetConfig { in_channels: 1, base_width: 2, depth: 1, out_channels: 2, seed: 0 };
        let net = build_net(&cfg, "net").unwrap();
        assert!(net.extend_head(1).is_err());
        let wide = net.extend_head(2).unwrap();
        assert!(wide.extend_head(2).is_err());
    }

    #[test]
    fn gradient_reaches_new_channels() {
        let cfg = NetConfig { in_channels: 1, base_width: 4, depth: 1, out_channels: 2, seed: 7 };
        let net = build_net(&cfg, "net").unwrap().extend_head(2).unwrap();
        let mut s = SeedStream::new(8);
        let x = rand_batch(&mut s, 1, 1, 8, 8);
        let mut g = Graph::new();
        let input = g.leaf(x);
        let out = net.forward_graph(&mut g, input, true).unwrap();
        let new_ch = g.slice_channels(out, 2, 3).unwrap();
        let loss = g.mean(new_ch);
        let grads = g.backward(loss).unwrap();
        let gw = &grads["net.head.w"];
        let w0 = net.cfg().base_width;
        let new_row_norm: f64 = gw.data()[2 * w0..3 * w0].iter().map(|v| v * v).sum();
        assert!(new_row_norm > 0.0);
    }

    #[test]
    fn indivisible_dims_rejected_at_forward() {
        let cfg = NetConfig { in_channels: 1, base_width: 2, depth: 2, out_channels: 2, seed: 0 };
        let net = build_net(&cfg, "net").unwrap();
        let mut s = SeedStream::new(0);
        let x = rand_batch(&mut s, 1, 1, 10, 12);
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn batched_rows_match_single_forward() {
        let cfg = NetConfig { in_channels: 1, base_width: 3, depth: 1, out_channels: 2, seed: 1 };
        let net = build_net(&cfg, "net").unwrap();
        let mut s = SeedStream::new(2);
        let batch = rand_batch(&mut s, 3, 1, 8, 8);
        let full = net.forward(&batch).unwrap();
        let per = 64;
        for i in 0..3 {
            let one = Tensor::new(
                vec![1, 1, 8, 8],
                batch.data()[i * per..(i + 1) * per].to_vec(),
            )
            .unwrap();
            let alone = net.forward(&one).unwrap();
            let stride = full.numel() / 3;
            assert_eq!(alone.data(), &full.data()[i * stride..(i + 1) * stride]);
        }
    }

    #[test]
    fn input_scaling_changes_logits() {
        let cfg = NetConfig { in_channels: 1, base_width: 3, depth: 1, out_channels: 2, seed: 6 };
        let net = build_net(&cfg, "net").unwrap();
        let mut s = SeedStream::new(3);
        let x = rand_batch(&mut s, 1, 1, 8, 8);
        let doubled = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 2.0 * v).collect())
            .unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&doubled).unwrap();
        assert!(a.data().iter().zip(b.data()).any(|(p, q)| (p - q).abs() > 1e-9));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let cfg = NetConfig { in_channels: 2, base_width: 2, depth: 1, out_channels: 2, seed: 0 };
        let net = build_net(&cfg, "net").unwrap();
        let mut s = SeedStream::new(0);
        assert!(net.forward(&rand_batch(&mut s, 1, 1, 8, 8)).is_err());
    }

    #[test]
    fn poisoned_weight_is_identified() {
        let cfg = NetConfig { in_channels: 1, base_width: 2, depth: 1, out_channels: 2, seed: 0 };
        let mut net = build_net(&cfg, "net").unwrap();
        net.params.get_mut("enc0.conv1.w").unwrap().data_mut()[0] = f64::NAN;
        let mut s = SeedStream::new(0);
        let err = net.forward(&rand_batch(&mut s, 1, 1, 8, 8)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("enc0.conv1"), "{msg}");
    }

    #[test]
    fn distinct_scopes_share_a_graph() {
        let cfg = NetConfig { in_channels: 1, base_width: 2, depth: 1, out_channels: 2, seed: 0 };
        let a = build_net(&cfg, "seg").unwrap();
        let b = build_net(&cfg, "gen").unwrap();
        let mut s = SeedStream::new(1);
        let x = rand_batch(&mut s, 1, 1, 8, 8);
        let mut g = Graph::new();
        let input = g.leaf(x);
        let oa = a.forward_graph(&mut g, input, true).unwrap();
        let ob = b.forward_graph(&mut g, input, true).unwrap();
        assert_eq!(g.value(oa).shape(), g.value(ob).shape());
    }
}
