use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::kv::{join_list, KvError, KvMap};
use crate::micrograd::{Graph, LayerKind, LayerSpec, MicrogradError, Mode, NodeId, Scalar, Tensor};

use super::PinNetError;

/// Architecture of the shared trunk and the two heads.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub input_channels: usize,
    /// Output channels of the five conv layers.
    pub conv_channels: Vec<usize>,
    /// Hidden widths of each head (two entries).
    pub fc_widths: Vec<usize>,
    /// Regression width; the classification head has `2·n_o` outputs.
    pub n_o: usize,
    pub dropout_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_side: 101,
            input_channels: 3,
            conv_channels: vec![32, 32, 64, 64, 128],
            fc_widths: vec![512, 512],
            n_o: 3,
            dropout_rate: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), PinNetError> {
        let bad = |m: String| Err(PinNetError::Config(m));
        if self.conv_channels.len() != 5 || self.conv_channels.contains(&0) {
            return bad(format!("conv_channels needs 5 positive entries, got {:?}", self.conv_channels));
        }
        if self.fc_widths.len() != 2 || self.fc_widths.contains(&0) {
            return bad(format!("fc_widths needs 2 positive entries, got {:?}", self.fc_widths));
        }
        if self.input_side % 2 == 0 {
            return bad(format!("input_side must be odd, got {}", self.input_side));
        }
        if self.input_side >> 4 < 2 {
            return bad(format!("input_side {} is too small for five 2x2 poolings", self.input_side));
        }
        if self.input_channels == 0 || self.n_o == 0 {
            return bad("input_channels and n_o must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Spatial side of the trunk output.
    pub fn trunk_side(&self) -> usize {
        (0..5).fold(self.input_side, |s, _| s / 2)
    }

    pub fn trunk_features(&self) -> usize {
        let s = self.trunk_side();
        s * s * self.conv_channels[4]
    }

    /// Layer-by-layer description of the graph `forward` builds.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let spec = |kind, fan_in, fan_out, dropout_rate| LayerSpec { kind, fan_in, fan_out, dropout_rate };
        let mut out = Vec::new();
        let mut c = self.input_channels;
        for &co in &self.conv_channels {
            out.push(spec(LayerKind::Conv3x3, c, co, 0.0));
            out.push(spec(LayerKind::Relu, co, co, 0.0));
            out.push(spec(LayerKind::MaxPool2x2, co, co, 0.0));
            c = co;
        }
        for head_out in [self.n_o, 2 * self.n_o] {
            let mut f = self.trunk_features();
            for &w in &self.fc_widths {
                out.push(spec(LayerKind::Dense, f, w, 0.0));
                out.push(spec(LayerKind::Relu, w, w, 0.0));
                out.push(spec(LayerKind::Dropout, w, w, self.dropout_rate));
                f = w;
            }
            out.push(spec(LayerKind::Dense, f, head_out, 0.0));
        }
        out.push(spec(LayerKind::Softmax, 2 * self.n_o, 2 * self.n_o, 0.0));
        out
    }

    /// Parameter block names and shapes in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c = self.input_channels;
        for (i, &co) in self.conv_channels.iter().enumerate() {
            out.push((format!("conv{}.kernels", i + 1), vec![3, 3, c, co]));
            out.push((format!("conv{}.bias", i + 1), vec![co]));
            c = co;
        }
        for (head, head_out) in [("reg", self.n_o), ("cls", 2 * self.n_o)] {
            let mut f = self.trunk_features();
            let widths = [self.fc_widths[0], self.fc_widths[1], head_out];
            for (j, &w) in widths.iter().enumerate() {
                out.push((format!("{head}.fc{}.weights", j + 1), vec![f, w]));
                out.push((format!("{head}.fc{}.bias", j + 1), vec![w]));
                f = w;
            }
        }
        out
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("patch_size", self.input_side);
        kv.set("input_channels", self.input_channels);
        kv.set("conv_channels", join_list(&self.conv_channels));
        kv.set("fc_widths", join_list(&self.fc_widths));
        kv.set("n_o", self.n_o);
        kv.set("dropout_rate", self.dropout_rate);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        Ok(Self {
            input_side: kv.get("patch_size")?,
            input_channels: kv.get("input_channels")?,
            conv_channels: kv.get_list("conv_channels")?,
            fc_widths: kv.get_list("fc_widths")?,
            n_o: kv.get("n_o")?,
            dropout_rate: kv.get("dropout_rate")?,
        })
    }
}

/// `(d, P)`: regression displacement and direction-class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    pub d: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Trunk + heads with their parameters. Immutable parameters may be shared by
/// any number of concurrent forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<ParamBlock<T>>,
}

/// A built graph with handles to the parameter leaves and both outputs.
pub struct ForwardPass<T: Scalar> {
    pub graph: Graph<T>,
    pub params: Vec<NodeId>,
    pub d: NodeId,
    pub p: NodeId,
}

impl<T: Scalar> Network<T> {
    /// Weights from a normal(0, sigma) truncated at ±2·sigma; biases zero.
    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, sigma: f64, rng: &mut R) -> Result<Self, PinNetError> {
        config.validate()?;
        let normal = Normal::new(0.0, sigma).map_err(|e| PinNetError::Config(format!("weight_init_sigma: {e}")))?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::from_fn(&shape, |_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * sigma {
                            break T::from_f64(v);
                        }
                    })
                };
                ParamBlock { name, tensor }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: NetworkConfig, params: Vec<ParamBlock<T>>) -> Result<Self, PinNetError> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(PinNetError::Config(format!("expected {} parameter blocks, got {}", shapes.len(), params.len())));
        }
        for ((name, shape), block) in shapes.iter().zip(&params) {
            if name != &block.name || shape.as_slice() != block.tensor.shape() {
                return Err(PinNetError::Config(format!(
                    "parameter block `{}` {:?} does not match expected `{name}` {shape:?}",
                    block.name,
                    block.tensor.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[ParamBlock<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamBlock<T>] {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|b| ParamBlock { name: b.name.clone(), tensor: b.tensor.cast() })
                .collect(),
        }
    }

    /// Builds the graph for a `[n, s, s, c]` batch. Dropout is active only when
    /// an RNG is supplied (train mode).
    pub fn forward_graph(
        &self,
        input: Tensor<T>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardPass<T>, PinNetError> {
        let cfg = &self.config;
        let shape = input.shape().to_vec();
        if shape.len() != 4 || shape[1] != cfg.input_side || shape[2] != cfg.input_side || shape[3] != cfg.input_channels {
            return Err(PinNetError::Micrograd(MicrogradError::Shape(format!(
                "network expects [n, {s}, {s}, {c}], got {shape:?}",
                s = cfg.input_side,
                c = cfg.input_channels
            ))));
        }
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|b| graph.param(b.tensor.clone())).collect();
        let mut rng = dropout_rng;

        let mut h = graph.input(input);
        for i in 0..5 {
            h = graph.conv3x3(h, ids[2 * i], ids[2 * i + 1])?;
            h = graph.relu(h);
            h = graph.maxpool2x2(h)?;
        }
        let trunk = graph.flatten(h);

        let mut heads = [trunk; 2];
        for (head, out) in heads.iter_mut().enumerate() {
            let base = 10 + head * 6;
            let mut z = trunk;
            for layer in 0..3 {
                z = graph.dense(z, ids[base + 2 * layer], ids[base + 2 * layer + 1])?;
                if layer < 2 {
                    z = graph.relu(z);
                    if let Some(r) = rng.as_deref_mut() {
                        z = graph.dropout(z, cfg.dropout_rate, Mode::Train, r)?;
                    }
                }
            }
            *out = z;
        }
        let p = graph.softmax(heads[1]);
        Ok(ForwardPass { graph, params: ids, d: heads[0], p })
    }

    /// Deterministic (dropout off) forward pass over a batch.
    pub fn predict(&self, input: Tensor<T>) -> Result<Vec<NetworkOutput>, PinNetError> {
        let pass = self.forward_graph(input, None)?;
        Ok(outputs_of(&pass))
    }

    pub fn forward(&self, input: Tensor<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<Vec<NetworkOutput>, PinNetError> {
        let pass = match mode {
            Mode::Train => self.forward_graph(input, Some(rng))?,
            Mode::Infer => self.forward_graph(input, None)?,
        };
        Ok(outputs_of(&pass))
    }
}

pub fn outputs_of<T: Scalar>(pass: &ForwardPass<T>) -> Vec<NetworkOutput> {
    let d = pass.graph.value(pass.d);
    let p = pass.graph.value(pass.p);
    let n_o = *d.shape().last().expect("rank 2");
    d.data()
        .chunks(n_o)
        .zip(p.data().chunks(2 * n_o))
        .map(|(dc, pc)| NetworkOutput {
            d: dc.iter().map(|v| v.as_f64()).collect(),
            p: pc.iter().map(|v| v.as_f64()).collect(),
        })
        .collect()
}
