use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    add_assign, concat_channels, global_avg_pool, global_avg_pool_backward, sigmoid,
    split_channels, upsample2x, upsample2x_backward, BlockCache, Conv2d, ConvBnRelu, Linear1,
    Param,
};
use super::tensor::Tensor;
use super::ArchitectureSpec;

/// Network outputs: per-pixel tumour probability and, with the classifier
/// head, one patch probability per item.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub seg: Tensor,
    pub cls: Option<Vec<f32>>,
}

/// Everything the backward pass needs from a training forward pass.
pub struct Tape {
    encoder: Vec<[Option<BlockCache>; 2]>,
    decoder: Vec<[Option<BlockCache>; 2]>,
    /// Channel count of the upsampled path entering each decoder stage.
    up_channels: Vec<usize>,
    head_input: Tensor,
    latent_shape: [usize; 4],
    pooled: Vec<f32>,
    output: ForwardOutput,
}

impl Tape {
    pub fn output(&self) -> &ForwardOutput {
        &self.output
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    encoder: Vec<[ConvBnRelu; 2]>,
    decoder: Vec<[ConvBnRelu; 2]>,
    head: Conv2d,
    classifier: Option<Linear1>,
}

impl UNet {
    pub fn new(spec: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = spec.init_gain;
        let enc = &spec.stage_widths;
        let dec = &spec.decoder_widths;
        let mut encoder = Vec::with_capacity(enc.len());
        let mut in_c = spec.input_channels;
        for (i, &w) in enc.iter().enumerate() {
            encoder.push([
                ConvBnRelu::new(&format!("encoder.{i}.0"), in_c, w, 2, gain, &mut rng),
                ConvBnRelu::new(&format!("encoder.{i}.1"), w, w, 1, gain, &mut rng),
            ]);
            in_c = w;
        }
        let mut decoder = Vec::with_capacity(dec.len());
        let mut prev = *enc.last().expect("validated widths");
        for (j, &w) in dec.iter().enumerate() {
            let skip = skip_index(enc.len(), j).map_or(0, |s| enc[s]);
            decoder.push([
                ConvBnRelu::new(&format!("decoder.{j}.0"), prev + skip, w, 1, gain, &mut rng),
                ConvBnRelu::new(&format!("decoder.{j}.1"), w, w, 1, gain, &mut rng),
            ]);
            prev = w;
        }
        let head = Conv2d::new("head", prev, 1, 1, 1, true, 1.0, &mut rng);
        let classifier = spec
            .classifier
            .then(|| Linear1::new("classifier", *enc.last().unwrap(), &mut rng));
        Self {
            encoder,
            decoder,
            head,
            classifier,
        }
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    /// Evaluation-mode forward pass (running batch-norm statistics).
    pub fn predict(&self, x: &Tensor) -> ForwardOutput {
        let mut h = x.clone();
        let mut feats = Vec::with_capacity(self.encoder.len());
        for [a, b] in &self.encoder {
            h = b.forward_eval(&a.forward_eval(&h));
            feats.push(h.clone());
        }
        let latent = feats.last().unwrap();
        let mut d = latent.clone();
        for (j, [a, b]) in self.decoder.iter().enumerate() {
            let up = upsample2x(&d);
            let input = match skip_index(self.encoder.len(), j) {
                Some(s) => concat_channels(&up, &feats[s]),
                None => up,
            };
            d = b.forward_eval(&a.forward_eval(&input));
        }
        let mut seg = self.head.forward(&d);
        seg.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let cls = self.classifier.as_ref().map(|c| {
            let pooled = global_avg_pool(latent);
            c.forward(&pooled, x.batch())
                .into_iter()
                .map(sigmoid)
                .collect()
        });
        ForwardOutput { seg, cls }
    }

    /// Training-mode forward pass: batch statistics, running-stat update, and
    /// a tape for [`UNet::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Tape {
        let mut h = x.clone();
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        for [a, b] in self.encoder.iter_mut() {
            let (h1, c1) = a.forward_train(h);
            let (h2, c2) = b.forward_train(h1);
            enc_caches.push([Some(c1), Some(c2)]);
            feats.push(h2.clone());
            h = h2;
        }
        let n_enc = self.encoder.len();
        let latent = feats.last().unwrap().clone();
        let mut d = latent.clone();
        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        let mut up_channels = Vec::with_capacity(self.decoder.len());
        for (j, [a, b]) in self.decoder.iter_mut().enumerate() {
            let up = upsample2x(&d);
            up_channels.push(up.channels());
            let input = match skip_index(n_enc, j) {
                Some(s) => concat_channels(&up, &feats[s]),
                None => up,
            };
            let (d1, c1) = a.forward_train(input);
            let (d2, c2) = b.forward_train(d1);
            dec_caches.push([Some(c1), Some(c2)]);
            d = d2;
        }
        let mut seg = self.head.forward(&d);
        seg.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let pooled = global_avg_pool(&latent);
        let cls = self.classifier.as_ref().map(|c| {
            c.forward(&pooled, x.batch())
                .into_iter()
                .map(sigmoid)
                .collect()
        });
        Tape {
            encoder: enc_caches,
            decoder: dec_caches,
            up_channels,
            head_input: d,
            latent_shape: latent.shape,
            pooled,
            output: ForwardOutput { seg, cls },
        }
    }

    /// Backpropagates gradients given with respect to the output
    /// probabilities, accumulating into every parameter's `grad`.
    pub fn backward(&mut self, mut tape: Tape, d_seg: &Tensor, d_cls: Option<&[f32]>) {
        let seg = &tape.output.seg;
        assert_eq!(seg.shape, d_seg.shape, "seg gradient shape");
        let mut dlogit = d_seg.clone();
        for (d, &p) in dlogit.data.iter_mut().zip(&seg.data) {
            *d *= p * (1.0 - p);
        }
        let mut dd = self
            .head
            .backward(&tape.head_input, &dlogit, true)
            .expect("dx requested");

        let n_enc = self.encoder.len();
        let mut d_feats: Vec<Option<Tensor>> = vec![None; n_enc];
        for j in (0..self.decoder.len()).rev() {
            let [a, b] = &mut self.decoder[j];
            let [c1, c2] = &mut tape.decoder[j];
            let d1 = b.backward(c2.take().unwrap(), dd, true).unwrap();
            let dinput = a.backward(c1.take().unwrap(), d1, true).unwrap();
            let dup = match skip_index(n_enc, j) {
                Some(s) => {
                    let (dup, dskip) = split_channels(&dinput, tape.up_channels[j]);
                    accumulate(&mut d_feats[s], dskip);
                    dup
                }
                None => dinput,
            };
            dd = upsample2x_backward(&dup);
        }
        accumulate(&mut d_feats[n_enc - 1], dd);

        if let (Some(c), Some(dc)) = (self.classifier.as_mut(), d_cls) {
            let cls = tape.output.cls.as_ref().expect("classifier output");
            let dl: Vec<f32> = dc.iter().zip(cls).map(|(d, p)| d * p * (1.0 - p)).collect();
            let dpooled = c.backward(&tape.pooled, &dl);
            accumulate(
                &mut d_feats[n_enc - 1],
                global_avg_pool_backward(&dpooled, tape.latent_shape),
            );
        }

        let mut carry: Option<Tensor> = None;
        for i in (0..n_enc).rev() {
            let mut g = d_feats[i].take();
            if let Some(c) = carry.take() {
                accumulate(&mut g, c);
            }
            let Some(g) = g else { continue };
            let [a, b] = &mut self.encoder[i];
            let [c1, c2] = &mut tape.encoder[i];
            let g = b.backward(c2.take().unwrap(), g, true).unwrap();
            carry = a.backward(c1.take().unwrap(), g, i > 0);
        }
    }

    /// All tensors in a fixed order; the flag marks non-trainable buffers.
    pub fn tensors(&self) -> Vec<(&Param, bool)> {
        let mut out = Vec::new();
        let blocks = self.encoder.iter().chain(&self.decoder).flatten();
        for blk in blocks {
            out.push((&blk.conv.weight, false));
            out.push((&blk.bn.gamma, false));
            out.push((&blk.bn.beta, false));
            out.push((&blk.bn.running_mean, true));
            out.push((&blk.bn.running_var, true));
        }
        out.push((&self.head.weight, false));
        out.push((self.head.bias.as_ref().unwrap(), false));
        if let Some(c) = &self.classifier {
            out.push((&c.weight, false));
            out.push((&c.bias, false));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&mut Param, bool)> {
        let mut out = Vec::new();
        let blocks = self
            .encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flatten();
        for blk in blocks {
            out.push((&mut blk.conv.weight, false));
            out.push((&mut blk.bn.gamma, false));
            out.push((&mut blk.bn.beta, false));
            out.push((&mut blk.bn.running_mean, true));
            out.push((&mut blk.bn.running_var, true));
        }
        out.push((&mut self.head.weight, false));
        out.push((self.head.bias.as_mut().unwrap(), false));
        if let Some(c) = &mut self.classifier {
            out.push((&mut c.weight, false));
            out.push((&mut c.bias, false));
        }
        out
    }

    /// Trainable parameters only.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.tensors_mut()
            .into_iter()
            .filter_map(|(p, buffer)| (!buffer).then_some(p))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Encoder feature feeding decoder stage `j`; the last stage has none.
fn skip_index(n_enc: usize, j: usize) -> Option<usize> {
    (j + 2 <= n_enc).then(|| n_enc - 2 - j)
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => add_assign(acc, &t),
        None => *slot = Some(t),
    }
}
