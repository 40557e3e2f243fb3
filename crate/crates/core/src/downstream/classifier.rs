//! Residual convolutional land-cover classifier. The stem kernel is always
//! initialized for 3 channels; 6-channel inputs widen it by copying the
//! 3-channel kernels into both halves and halving them, which preserves the
//! expected activation scale.

use ndarray::{Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use sar2rgb_nn::conv::ConvSpec;
use sar2rgb_nn::optim::AdamW;
use sar2rgb_nn::{params, rng, NodeId, ParamId, ParamStore, Tape};

use crate::error::{Error, Result};
use crate::metrics::accuracy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_channels: usize,
    pub class_count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Stage widths of the residual trunk.
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl ClassifierSpec {
    /// Paper-default optimizer settings with a desk-scale trunk.
    pub fn defaults(input_channels: usize, class_count: usize, seed: u64) -> Self {
        ClassifierSpec {
            input_channels,
            class_count,
            epochs: 20,
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            batch_size: 10,
            widths: vec![16, 32],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 3 && self.input_channels != 6 {
            return Err(Error::Config(format!(
                "classifier input_channels must be 3 or 6, got {}",
                self.input_channels
            )));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be >= 2".into()));
        }
        if self.epochs == 0
            || self.batch_size == 0
            || self.learning_rate <= 0.0
            || self.weight_decay < 0.0
            || self.widths.is_empty()
        {
            return Err(Error::Config("invalid classifier hyperparameters".into()));
        }
        Ok(())
    }
}

/// Replicate-and-rescale widening of a `[w, 3, k, k]` stem kernel to six
/// input channels.
pub fn widen_stem_kernel(k3: &ArrayD<f64>) -> ArrayD<f64> {
    let sh = k3.shape();
    assert_eq!(sh[1], 3, "widen expects a 3-channel kernel");
    let mut out = ArrayD::zeros(ndarray::IxDyn(&[sh[0], 6, sh[2], sh[3]]));
    for o in 0..sh[0] {
        for c in 0..3 {
            for y in 0..sh[2] {
                for x in 0..sh[3] {
                    let v = 0.5 * k3[[o, c, y, x]];
                    out[[o, c, y, x]] = v;
                    out[[o, c + 3, y, x]] = v;
                }
            }
        }
    }
    out
}

struct NormParams {
    gamma: ParamId,
    beta: ParamId,
}

struct StageParams {
    res_w1: ParamId,
    res_b1: ParamId,
    res_n1: NormParams,
    res_w2: ParamId,
    res_b2: ParamId,
    res_n2: NormParams,
    down: Option<(ParamId, ParamId, NormParams)>,
}

pub struct Classifier {
    pub spec: ClassifierSpec,
    store: ParamStore,
    stem_w: ParamId,
    stem_b: ParamId,
    stem_norm: NormParams,
    stages: Vec<StageParams>,
    head_w: ParamId,
    head_b: ParamId,
}

fn add_norm(store: &mut ParamStore, name: &str, channels: usize) -> NormParams {
    NormParams {
        gamma: store.add(&format!("{name}.gamma"), ArrayD::from_elem(ndarray::IxDyn(&[channels]), 1.0)),
        beta: store.add(&format!("{name}.beta"), params::zeros(&[channels])),
    }
}

impl Classifier {
    pub fn init(spec: ClassifierSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::derive(spec.seed, 0xC1A55);
        let w0 = spec.widths[0];

        // stem: 3-channel init, widened when the input carries both modalities
        let k3 = params::kaiming_conv(&mut r, &[w0, 3, 3, 3]);
        let stem_kernel = if spec.input_channels == 6 {
            widen_stem_kernel(&k3)
        } else {
            k3
        };
        let stem_w = store.add("stem.w", stem_kernel);
        let stem_b = store.add("stem.b", params::zeros(&[w0]));
        let stem_norm = add_norm(&mut store, "stem.norm", w0);

        let mut stages = Vec::new();
        for (i, &w) in spec.widths.iter().enumerate() {
            let down = if i + 1 < spec.widths.len() {
                let wn = spec.widths[i + 1];
                Some((
                    store.add(&format!("stage{i}.down.w"), params::kaiming_conv(&mut r, &[wn, w, 3, 3])),
                    store.add(&format!("stage{i}.down.b"), params::zeros(&[wn])),
                    add_norm(&mut store, &format!("stage{i}.down.norm"), wn),
                ))
            } else {
                None
            };
            stages.push(StageParams {
                res_w1: store.add(&format!("stage{i}.res.w1"), params::kaiming_conv(&mut r, &[w, w, 3, 3])),
                res_b1: store.add(&format!("stage{i}.res.b1"), params::zeros(&[w])),
                res_n1: add_norm(&mut store, &format!("stage{i}.res.n1"), w),
                res_w2: store.add(&format!("stage{i}.res.w2"), params::kaiming_conv(&mut r, &[w, w, 3, 3])),
                res_b2: store.add(&format!("stage{i}.res.b2"), params::zeros(&[w])),
                res_n2: add_norm(&mut store, &format!("stage{i}.res.n2"), w),
                down,
            });
        }
        let last = *spec.widths.last().unwrap();
        let head_w = store.add("head.w", params::xavier_uniform(&mut r, last, spec.class_count));
        let head_b = store.add("head.b", params::zeros(&[spec.class_count]));
        Ok(Classifier {
            spec,
            store,
            stem_w,
            stem_b,
            stem_norm,
            stages,
            head_w,
            head_b,
        })
    }

    pub fn stem_kernel(&self) -> &ArrayD<f64> {
        self.store.value(self.stem_w)
    }

    fn norm(&self, tape: &mut Tape, x: NodeId, np: &NormParams, shape: (usize, usize, usize, usize)) -> NodeId {
        let (b, c, h, w) = shape;
        // group norm with a single group: normalize over (c, h, w), then a
        // per-channel affine
        let flat = tape.reshape(x, &[b, c * h * w]);
        let normed = tape.layer_norm(flat, 1e-5);
        let back = tape.reshape(normed, &[b, c, h, w]);
        let g = tape.param(&self.store, np.gamma);
        let bt = tape.param(&self.store, np.beta);
        tape.channel_affine(back, g, bt)
    }

    fn logits_node(&self, tape: &mut Tape, x: &Array4<f64>) -> NodeId {
        let (b, _, mut h, mut w) = x.dim();
        let xn = tape.constant(x.clone().into_dyn());
        let sw = tape.param(&self.store, self.stem_w);
        let sb = tape.param(&self.store, self.stem_b);
        let mut cur = tape.conv2d(xn, sw, sb, ConvSpec { stride: 1, pad: 1 });
        let mut width = self.spec.widths[0];
        cur = self.norm(tape, cur, &self.stem_norm, (b, width, h, w));
        cur = tape.gelu(cur);
        for stage in &self.stages {
            let w1 = tape.param(&self.store, stage.res_w1);
            let b1 = tape.param(&self.store, stage.res_b1);
            let mut hmid = tape.conv2d(cur, w1, b1, ConvSpec { stride: 1, pad: 1 });
            hmid = self.norm(tape, hmid, &stage.res_n1, (b, width, h, w));
            hmid = tape.gelu(hmid);
            let w2 = tape.param(&self.store, stage.res_w2);
            let b2 = tape.param(&self.store, stage.res_b2);
            let mut hmid2 = tape.conv2d(hmid, w2, b2, ConvSpec { stride: 1, pad: 1 });
            hmid2 = self.norm(tape, hmid2, &stage.res_n2, (b, width, h, w));
            cur = tape.add(cur, hmid2);
            cur = tape.gelu(cur);
            if let Some((dw, db, dn)) = &stage.down {
                let dwn = tape.param(&self.store, *dw);
                let dbn = tape.param(&self.store, *db);
                cur = tape.conv2d(cur, dwn, dbn, ConvSpec { stride: 2, pad: 1 });
                h = h.div_ceil(2);
                w = w.div_ceil(2);
                width = self.store.value(*dw).shape()[0];
                cur = self.norm(tape, cur, dn, (b, width, h, w));
                cur = tape.gelu(cur);
            }
        }
        let pooled = tape.global_avg_pool(cur);
        let hw = tape.param(&self.store, self.head_w);
        let hb = tape.param(&self.store, self.head_b);
        tape.affine(pooled, hw, hb)
    }

    /// Argmax class prediction, batched internally.
    pub fn predict(&self, inputs: &[Array3<f64>]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(32) {
            let batch = stack_inputs(chunk, self.spec.input_channels)?;
            let mut tape = Tape::new();
            let logits = self.logits_node(&mut tape, &batch);
            let v = tape
                .value(logits)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            for row in v.rows() {
                let mut best = 0usize;
                for (i, &val) in row.iter().enumerate() {
                    if val > row[best] {
                        best = i;
                    }
                }
                out.push(best as u32);
            }
        }
        Ok(out)
    }
}

fn stack_inputs(inputs: &[Array3<f64>], channels: usize) -> Result<Array4<f64>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Shape("empty input batch".into()))?;
    let (c, h, w) = first.dim();
    if c != channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, classifier expects {channels}"
        )));
    }
    let mut out = Array4::<f64>::zeros((inputs.len(), c, h, w));
    for (i, x) in inputs.iter().enumerate() {
        if x.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "input {i} shape {:?} differs from {:?}",
                x.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(x);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

/// Train on `(input, label)` pairs, logging train/eval accuracy per epoch.
/// Deterministic under a fixed spec seed and serial execution.
pub fn train_classifier(
    train: &[(Array3<f64>, u32)],
    eval: &[(Array3<f64>, u32)],
    spec: ClassifierSpec,
) -> Result<(Classifier, Vec<EpochLog>)> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Config("classifier training set is empty".into()));
    }
    let distinct: std::collections::BTreeSet<u32> = train.iter().map(|(_, l)| *l).collect();
    if distinct.len() < 2 {
        return Err(Error::Config(
            "classifier training set holds a single class".into(),
        ));
    }
    for (_, l) in train.iter().chain(eval.iter()) {
        if *l as usize >= spec.class_count {
            return Err(Error::Config(format!(
                "label {l} >= class_count {}",
                spec.class_count
            )));
        }
    }
    let mut clf = Classifier::init(spec.clone())?;
    let mut opt = AdamW::new(&clf.store, spec.learning_rate, spec.weight_decay);
    let train_inputs: Vec<Array3<f64>> = train.iter().map(|(x, _)| x.clone()).collect();
    let train_labels: Vec<u32> = train.iter().map(|(_, l)| *l).collect();
    let eval_inputs: Vec<Array3<f64>> = eval.iter().map(|(x, _)| x.clone()).collect();
    let eval_labels: Vec<u32> = eval.iter().map(|(_, l)| *l).collect();

    let mut log = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut r = rng::derive(spec.seed, 0xE50C ^ epoch as u64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        for chunk in order.chunks(spec.batch_size) {
            let inputs: Vec<Array3<f64>> = chunk.iter().map(|&i| train[i].0.clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].1 as usize).collect();
            let batch = stack_inputs(&inputs, spec.input_channels)?;
            let mut tape = Tape::new();
            let logits = clf.logits_node(&mut tape, &batch);
            let loss = tape.cross_entropy(logits, &targets);
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "classifier loss non-finite at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss, &clf.store);
            opt.step(&mut clf.store, &grads);
        }
        let train_acc = accuracy(&clf.predict(&train_inputs)?, &train_labels)?;
        let eval_acc = if eval.is_empty() {
            f64::NAN
        } else {
            accuracy(&clf.predict(&eval_inputs)?, &eval_labels)?
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            train_accuracy: train_acc,
            eval_accuracy: eval_acc,
        });
    }
    Ok((clf, log))
}
