//! Gated 1D-CNN: units applied in order under a [`GatePlan`], followed by
//! global average pooling and a linear head.
//!
//! A preserved unit computes `ReLU(F_conv(F_tr(x)))` where `F_tr` is the
//! identity or `ReLU(W' ⊛ x)` with a pointwise adapter `W'`. A skipped unit
//! passes its input through untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{relu_backward, BatchNorm, BatchNormCache, Conv1d, Head, Slot, SlotAllocator};
use super::spec::{ConvUnitSpec, GatePlan, NetworkSpec, UnitKind};
use super::tensor::{ActivationMap, Tensor3};
use crate::{Error, Result};

/// A conv optionally followed by batch norm.
#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv1d,
    bn: Option<BatchNorm>,
}

struct ConvBnCache {
    input: Tensor3,
    bn: Option<BatchNormCache>,
}

enum Buffers<'a> {
    Train(&'a mut [f64]),
    Eval(&'a [f64]),
}

impl ConvBn {
    fn new(p: &mut SlotAllocator, b: &mut SlotAllocator, cin: usize, cout: usize, k: usize, bn: bool) -> Self {
        Self {
            conv: Conv1d::new(p, cin, cout, k, !bn),
            bn: bn.then(|| BatchNorm::new(p, b, cout)),
        }
    }

    fn init(&self, params: &mut [f64], buffers: &mut [f64], rng: &mut ChaCha8Rng) {
        self.conv.init(params, rng);
        if let Some(bn) = &self.bn {
            bn.init(params, buffers);
        }
    }

    fn forward(&self, params: &[f64], buffers: &mut Buffers<'_>, x: &Tensor3) -> Result<(Tensor3, Option<ConvBnCache>)> {
        let y = self.conv.forward(params, x)?;
        match buffers {
            Buffers::Eval(buf) => {
                let y = match &self.bn {
                    Some(bn) => bn.forward_eval(params, buf, &y),
                    None => y,
                };
                Ok((y, None))
            }
            Buffers::Train(buf) => {
                let (y, bn_cache) = match &self.bn {
                    Some(bn) => {
                        let (y, c) = bn.forward_train(params, buf, &y);
                        (y, Some(c))
                    }
                    None => (y, None),
                };
                Ok((
                    y,
                    Some(ConvBnCache {
                        input: x.clone(),
                        bn: bn_cache,
                    }),
                ))
            }
        }
    }

    fn backward(&self, params: &[f64], grads: &mut [f64], cache: &ConvBnCache, dy: &Tensor3) -> Tensor3 {
        let dy = match (&self.bn, &cache.bn) {
            (Some(bn), Some(c)) => bn.backward(params, grads, c, dy),
            _ => dy.clone(),
        };
        self.conv.backward(params, grads, &cache.input, &dy)
    }
}

#[derive(Debug, Clone)]
struct UnitModule {
    stages: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
    residual: bool,
    params: Slot,
    buffers: Slot,
}

struct UnitCache {
    stages: Vec<ConvBnCache>,
    /// Post-ReLU outputs of every stage but the last.
    hidden: Vec<Tensor3>,
    shortcut: Option<ConvBnCache>,
}

impl UnitModule {
    fn new(spec: &ConvUnitSpec, p: &mut SlotAllocator, b: &mut SlotAllocator) -> Self {
        let (p0, b0) = (p.total(), b.total());
        let mut c = spec.in_channels;
        let stages = spec
            .kernel_lengths
            .iter()
            .map(|&k| {
                let s = ConvBn::new(p, b, c, spec.out_channels, k, spec.has_batchnorm);
                c = spec.out_channels;
                s
            })
            .collect();
        let shortcut = spec
            .has_projection()
            .then(|| ConvBn::new(p, b, spec.in_channels, spec.out_channels, 1, spec.has_batchnorm));
        Self {
            stages,
            shortcut,
            residual: spec.kind == UnitKind::ResidualBlock,
            params: Slot {
                offset: p0,
                len: p.total() - p0,
            },
            buffers: Slot {
                offset: b0,
                len: b.total() - b0,
            },
        }
    }

    fn init(&self, params: &mut [f64], buffers: &mut [f64], rng: &mut ChaCha8Rng) {
        for s in self.stages.iter().chain(&self.shortcut) {
            s.init(params, buffers, rng);
        }
    }

    /// `F_conv(x)`: the unit's output before the gating ReLU.
    fn forward(&self, params: &[f64], buffers: &mut Buffers<'_>, x: &Tensor3) -> Result<(Tensor3, Option<UnitCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::new();
        let mut hidden = Vec::new();
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            let (mut y, c) = stage.forward(params, buffers, &h)?;
            caches.extend(c);
            if i < last {
                y.relu_in_place();
                if matches!(buffers, Buffers::Train(_)) {
                    hidden.push(y.clone());
                }
            }
            h = y;
        }
        let mut sc_cache = None;
        if self.residual {
            let skip = match &self.shortcut {
                Some(sc) => {
                    let (s, c) = sc.forward(params, buffers, x)?;
                    sc_cache = c;
                    s
                }
                None => x.clone(),
            };
            for (a, b) in h.data_mut().iter_mut().zip(skip.data()) {
                *a += b;
            }
        }
        let cache = matches!(buffers, Buffers::Train(_)).then_some(UnitCache {
            stages: caches,
            hidden,
            shortcut: sc_cache,
        });
        Ok((h, cache))
    }

    fn backward(&self, params: &[f64], grads: &mut [f64], cache: &UnitCache, dy: &Tensor3) -> Tensor3 {
        let mut d = dy.clone();
        for i in (0..self.stages.len()).rev() {
            if i < self.stages.len() - 1 {
                d = relu_backward(&cache.hidden[i], &d);
            }
            d = self.stages[i].backward(params, grads, &cache.stages[i], &d);
        }
        if self.residual {
            let dskip = match (&self.shortcut, &cache.shortcut) {
                (Some(sc), Some(c)) => sc.backward(params, grads, c, dy),
                _ => dy.clone(),
            };
            for (a, b) in d.data_mut().iter_mut().zip(dskip.data()) {
                *a += b;
            }
        }
        d
    }
}

enum GatedCache {
    Skipped,
    Active {
        adapter: Option<(Tensor3, Tensor3)>,
        unit: UnitCache,
        output: Tensor3,
    },
}

/// Everything a training forward pass keeps for the backward pass.
pub struct Tape {
    units: Vec<GatedCache>,
    head_input_shape: (usize, usize, usize),
    pooled: Vec<f64>,
}

impl Tape {
    /// Post-activation outputs `O_l` of every preserved unit in this pass.
    pub fn captured(&self) -> Vec<ActivationMap> {
        self.units
            .iter()
            .enumerate()
            .filter_map(|(l, c)| match c {
                GatedCache::Active { output, .. } => Some(ActivationMap {
                    unit_index: l,
                    data: output.clone(),
                }),
                GatedCache::Skipped => None,
            })
            .collect()
    }
}

/// Result of an inference pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Pre-softmax scores, `[batch][classes]` row-major.
    pub logits: Vec<f64>,
    pub classes: usize,
    /// Captured unit outputs (empty unless capture was requested).
    pub captured: Vec<ActivationMap>,
    /// Input to the pooling head (the last preserved unit's output).
    pub final_features: Tensor3,
}

impl Forward {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .chunks(self.classes)
            .map(argmax)
            .collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// A parameterised network under a fixed gate plan.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    plan: GatePlan,
    units: Vec<Option<UnitModule>>,
    adapters: Vec<Option<Conv1d>>,
    head: Head,
    params: Vec<f64>,
    buffers: Vec<f64>,
}

impl Network {
    /// Lays out and Xavier-initialises a network; the RNG is seeded from
    /// `spec.seed`. Skipped units get no parameters at all.
    pub fn new(spec: NetworkSpec, plan: GatePlan) -> Result<Self> {
        let seed = spec.seed;
        let mut net = Self::layout(spec, plan)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.init_all(&mut rng);
        Ok(net)
    }

    /// Network with every unit preserved.
    pub fn ungated(spec: NetworkSpec) -> Result<Self> {
        let plan = GatePlan::all_preserved(&spec);
        Self::new(spec, plan)
    }

    fn layout(spec: NetworkSpec, plan: GatePlan) -> Result<Self> {
        spec.validate()?;
        plan.validate(&spec)?;
        let mut p = SlotAllocator::default();
        let mut b = SlotAllocator::default();
        let units = spec
            .units
            .iter()
            .zip(plan.gates())
            .map(|(u, &g)| g.then(|| UnitModule::new(u, &mut p, &mut b)))
            .collect();
        let adapters = plan
            .adapters()
            .iter()
            .map(|a| a.map(|a| Conv1d::new(&mut p, a.in_channels, a.out_channels, 1, false)))
            .collect();
        let head = Head::new(&mut p, plan.output_channels(&spec), spec.classes);
        Ok(Self {
            spec,
            plan,
            units,
            adapters,
            head,
            params: vec![0.0; p.total()],
            buffers: vec![0.0; b.total()],
        })
    }

    fn init_all(&mut self, rng: &mut ChaCha8Rng) {
        for u in self.units.iter().flatten() {
            u.init(&mut self.params, &mut self.buffers, rng);
        }
        for a in self.adapters.iter().flatten() {
            a.init(&mut self.params, rng);
        }
        self.head.init(&mut self.params, rng);
    }

    /// Builds the network for `plan`, carrying over the parameters and
    /// running statistics of every unit preserved by both plans. Adapters,
    /// and the head when its input width changes, are freshly initialised
    /// from `init_seed`. Returns the network and `(old, new)` parameter
    /// ranges that were copied, for optimizer state transfer.
    pub fn regulated(&self, plan: GatePlan, init_seed: u64) -> Result<(Network, Vec<(Slot, Slot)>)> {
        let mut net = Self::layout(self.spec.clone(), plan)?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        net.init_all(&mut rng);
        let mut copied = Vec::new();
        for (old, new) in self.units.iter().zip(&net.units) {
            if let (Some(o), Some(n)) = (old, new) {
                net.params[n.params.range()].copy_from_slice(o.params.of(&self.params));
                net.buffers[n.buffers.range()].copy_from_slice(o.buffers.of(&self.buffers));
                copied.push((o.params, n.params));
            }
        }
        for (old, new) in self.adapters.iter().zip(&net.adapters) {
            if let (Some(o), Some(n)) = (old, new) {
                if o.in_channels == n.in_channels {
                    net.params[n.weight.range()].copy_from_slice(o.weight.of(&self.params));
                    copied.push((o.weight, n.weight));
                }
            }
        }
        if self.head.in_channels == net.head.in_channels {
            for (o, n) in [(self.head.weight, net.head.weight), (self.head.bias, net.head.bias)] {
                net.params[n.range()].copy_from_slice(o.of(&self.params));
                copied.push((o, n));
            }
        }
        Ok((net, copied))
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn plan(&self) -> &GatePlan {
        &self.plan
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub(crate) fn set_state(&mut self, params: Vec<f64>, buffers: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() || buffers.len() != self.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "state sizes {}/{} do not match network layout {}/{}",
                params.len(),
                buffers.len(),
                self.params.len(),
                self.buffers.len()
            )));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    pub(crate) fn from_state(spec: NetworkSpec, plan: GatePlan, params: Vec<f64>, buffers: Vec<f64>) -> Result<Self> {
        let mut net = Self::layout(spec, plan)?;
        net.set_state(params, buffers)?;
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Pointwise adapter in front of unit `l`, if the plan induced one.
    pub fn adapter(&self, unit: usize) -> Option<&Conv1d> {
        self.adapters.get(unit).and_then(Option::as_ref)
    }

    /// Index of the last preserved unit.
    pub fn last_preserved(&self) -> Option<usize> {
        self.plan.gates().iter().rposition(|&g| g)
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.channels() != self.spec.input_channels {
            return Err(Error::ChannelMismatch {
                expected: self.spec.input_channels,
                actual: x.channels(),
            });
        }
        if x.batch() == 0 || x.length() == 0 {
            return Err(Error::invalid("empty input batch"));
        }
        Ok(())
    }

    /// `F_conv_l(x)` in inference mode, without adapter or gating ReLU.
    pub fn unit_preactivation(&self, unit: usize, x: &Tensor3) -> Result<Tensor3> {
        let m = self.units[unit]
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("unit {unit} is skipped and has no parameters")))?;
        Ok(m.forward(&self.params, &mut Buffers::Eval(&self.buffers), x)?.0)
    }

    /// Gated unit output in inference mode:
    /// `g·ReLU(F_conv(F_tr(x))) + (1-g)·x`.
    pub fn gated_unit_forward(&self, unit: usize, x: &Tensor3) -> Result<Tensor3> {
        let mut bufs = Buffers::Eval(&self.buffers);
        let (out, _) = self.gated_unit(unit, x, &mut bufs)?;
        Ok(out)
    }

    fn gated_unit(
        &self,
        l: usize,
        x: &Tensor3,
        bufs: &mut Buffers<'_>,
    ) -> Result<(Tensor3, GatedCache)> {
        let module = match &self.units[l] {
            None => return Ok((x.clone(), GatedCache::Skipped)),
            Some(m) => m,
        };
        let expected = self.spec.units[l].in_channels;
        let (input, adapter_cache) = match &self.adapters[l] {
            Some(a) => {
                if x.channels() != a.in_channels {
                    return Err(Error::ChannelMismatch {
                        expected: a.in_channels,
                        actual: x.channels(),
                    });
                }
                let mut z = a.forward(&self.params, x)?;
                z.relu_in_place();
                let cache = matches!(bufs, Buffers::Train(_)).then(|| (x.clone(), z.clone()));
                (z, cache)
            }
            None => {
                if x.channels() != expected {
                    return Err(Error::MissingAdapter {
                        unit: l,
                        expected,
                        actual: x.channels(),
                    });
                }
                (x.clone(), None)
            }
        };
        let (mut out, unit_cache) = module.forward(&self.params, bufs, &input)?;
        out.relu_in_place();
        let cache = match unit_cache {
            Some(unit) => GatedCache::Active {
                adapter: adapter_cache,
                unit,
                output: out.clone(),
            },
            None => GatedCache::Skipped,
        };
        Ok((out, cache))
    }

    /// Inference pass (batch norm uses running statistics).
    pub fn forward(&self, x: &Tensor3, capture: bool) -> Result<Forward> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut captured = Vec::new();
        let mut bufs = Buffers::Eval(&self.buffers);
        for l in 0..self.units.len() {
            let (out, _) = self.gated_unit(l, &h, &mut bufs)?;
            if capture && self.plan.gate(l) {
                captured.push(ActivationMap {
                    unit_index: l,
                    data: out.clone(),
                });
            }
            h = out;
        }
        let pooled = Head::pool(&h);
        let logits = self.head.logits(&self.params, &pooled, h.batch());
        Ok(Forward {
            logits,
            classes: self.spec.classes,
            captured,
            final_features: h,
        })
    }

    /// Training pass: batch statistics, running-stat updates, and a tape.
    pub fn forward_train(&mut self, x: &Tensor3) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x)?;
        let mut buffers = std::mem::take(&mut self.buffers);
        let result = self.forward_train_inner(x, &mut buffers);
        self.buffers = buffers;
        result
    }

    fn forward_train_inner(&self, x: &Tensor3, buffers: &mut [f64]) -> Result<(Vec<f64>, Tape)> {
        let mut h = x.clone();
        let mut units = Vec::with_capacity(self.units.len());
        let mut bufs = Buffers::Train(buffers);
        for l in 0..self.units.len() {
            let (out, cache) = self.gated_unit(l, &h, &mut bufs)?;
            units.push(cache);
            h = out;
        }
        let pooled = Head::pool(&h);
        let logits = self.head.logits(&self.params, &pooled, h.batch());
        Ok((
            logits,
            Tape {
                units,
                head_input_shape: (h.batch(), h.channels(), h.length()),
                pooled,
            },
        ))
    }

    /// Reverse pass from `∂L/∂logits`; returns the full parameter gradient.
    pub fn backward(&self, tape: &Tape, dlogits: &[f64]) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        let mut d = self
            .head
            .backward(&self.params, &mut grads, &tape.pooled, dlogits, tape.head_input_shape);
        for l in (0..self.units.len()).rev() {
            if let (
                Some(module),
                GatedCache::Active {
                    adapter,
                    unit,
                    output,
                },
            ) = (&self.units[l], &tape.units[l])
            {
                d = relu_backward(output, &d);
                d = module.backward(&self.params, &mut grads, unit, &d);
                if let (Some(conv), Some((input, out))) = (&self.adapters[l], adapter) {
                    d = relu_backward(out, &d);
                    d = conv.backward(&self.params, &mut grads, input, &d);
                }
            }
        }
        grads
    }

    /// Predicted classes, evaluated in chunks of `batch_size`.
    pub fn predict(&self, x: &Tensor3, batch_size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(x.batch());
        let idx: Vec<usize> = (0..x.batch()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            out.extend(self.forward(&x.select(chunk), false)?.predictions());
        }
        Ok(out)
    }

    /// Fraction of correctly classified instances.
    pub fn accuracy(&self, x: &Tensor3, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x, 64)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::layers::{conv1d, Padding};
    use rand::Rng;

    fn random_input(batch: usize, channels: usize, len: usize, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..batch * channels * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor3::from_channel_major(batch, channels, len, data).unwrap()
    }

    #[test]
    fn skipped_unit_is_exact_identity() {
        let spec = NetworkSpec::resnet_with_filters(4, 2, 3, &[4, 4]).with_seed(2);
        let plan = GatePlan::skipping(&spec, &[1]).unwrap();
        let net = Network::new(spec, plan).unwrap();
        let x = random_input(3, 4, 16, 5);
        let y = net.gated_unit_forward(1, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn preserved_unit_is_relu_of_preactivation() {
        let spec = NetworkSpec::resnet_with_filters(3, 2, 2, &[3, 5]).with_seed(4);
        let net = Network::ungated(spec).unwrap();
        let x = random_input(2, 3, 12, 6);
        let mut expected = net.unit_preactivation(0, &x).unwrap();
        expected.relu_in_place();
        assert_eq!(net.gated_unit_forward(0, &x).unwrap(), expected);
    }

    #[test]
    fn adapter_composition_matches_oracle() {
        let spec = NetworkSpec::fcn_with_filters(2, 3, 3, &[4, 6, 5])
            .with_batchnorm(false)
            .with_seed(9);
        let plan = GatePlan::skipping(&spec, &[1]).unwrap();
        let net = Network::new(spec, plan).unwrap();
        let a = net.adapter(2).expect("adapter induced");
        assert_eq!((a.in_channels, a.out_channels), (4, 6));

        let x = random_input(2, 4, 10, 3);
        let p = net.params();
        let mut z = conv1d(&x, a.weight.of(p), None, 6, 1, Padding::Same).unwrap();
        z.relu_in_place();
        let mut expected = net.unit_preactivation(2, &z).unwrap();
        expected.relu_in_place();
        assert_eq!(net.gated_unit_forward(2, &x).unwrap(), expected);
    }

    #[test]
    fn mismatch_without_adapter_is_rejected() {
        let spec = NetworkSpec::fcn_with_filters(2, 3, 2, &[4, 6]).with_seed(1);
        let net = Network::ungated(spec).unwrap();
        let wrong = random_input(1, 3, 8, 1);
        assert!(matches!(
            net.gated_unit_forward(1, &wrong),
            Err(Error::MissingAdapter { unit: 1, expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn head_only_network_pools_input() {
        let spec = NetworkSpec::resnet_with_filters(2, 3, 2, &[4, 4]).with_seed(3);
        let plan = GatePlan::skipping(&spec, &[0, 1]).unwrap();
        let net = Network::new(spec, plan).unwrap();
        let x = random_input(2, 2, 8, 2);
        let fwd = net.forward(&x, true).unwrap();
        assert!(fwd.captured.is_empty());
        let pooled = Head::pool(&x);
        assert_eq!(fwd.logits, net.head().logits(net.params(), &pooled, 2));
    }

    #[test]
    fn regulated_transfer_keeps_preserved_units() {
        let spec = NetworkSpec::resnet_with_filters(1, 2, 4, &[4, 6]).with_seed(3);
        let net = Network::ungated(spec.clone()).unwrap();
        let plan = GatePlan::skipping(&spec, &[2]).unwrap();
        let (reg, copied) = net.regulated(plan, 77).unwrap();
        assert!(reg.param_count() < net.param_count());
        for (o, n) in copied {
            assert_eq!(o.of(net.params()), n.of(reg.params()));
        }
        let x = random_input(2, 1, 16, 8);
        assert_eq!(
            net.gated_unit_forward(1, &net.gated_unit_forward(0, &x).unwrap()).unwrap(),
            reg.gated_unit_forward(1, &reg.gated_unit_forward(0, &x).unwrap()).unwrap()
        );
    }
}
