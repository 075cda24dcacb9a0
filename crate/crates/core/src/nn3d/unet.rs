use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    add_assign, concat_channels, conv3d_backward_impl, conv3d_forward, dropout_mask, maxpool3d, maxpool3d_backward,
    mul_elementwise, relu, relu_backward, softmax_channels, softmax_channels_backward, split_channels, upsample_conv,
    upsample_conv_backward,
};
use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Architecture hyperparameters of one assembly member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub dropout_rate: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 3,
            num_classes: 5,
            base_filters: 8,
            depth: 2,
            dropout_rate: 0.5,
        }
    }
}

impl UNetConfig {
    /// 24 base filters, as in the full-size fine assembly. Only used for size accounting.
    pub fn mri_fine(num_classes: usize, depth: usize) -> Self {
        UNetConfig {
            in_channels: 3,
            num_classes,
            base_filters: 24,
            depth,
            dropout_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.in_channels == 0 {
            return bad("in_channels must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.base_filters == 0 {
            return bad("base_filters must be positive");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial dims accepted by the network: divisible by `2^depth`.
    pub fn check_spatial(&self, dims: [usize; 3]) -> Result<(), NnError> {
        let m = 1 << self.depth;
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(NnError::Shape(format!(
                "spatial dims {dims:?} not divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        tensor_shapes(self).iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

fn conv_shapes(cin: usize, cout: usize, k: usize) -> [Vec<usize>; 2] {
    [vec![cout, cin, k, k, k], vec![cout]]
}

/// Tensor shapes implied by a configuration, in [`UNetParams::tensors`] order.
pub fn tensor_shapes(config: &UNetConfig) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for l in 0..=config.depth {
        let cin = if l == 0 {
            config.in_channels
        } else {
            config.filters(l - 1)
        };
        out.extend(conv_shapes(cin, config.filters(l), 3));
        out.extend(conv_shapes(config.filters(l), config.filters(l), 3));
    }
    for l in 0..config.depth {
        let f = config.filters(l);
        out.extend(conv_shapes(config.filters(l + 1), f, 3));
        out.extend(conv_shapes(2 * f, f, 3));
        out.extend(conv_shapes(f, f, 3));
    }
    out.extend(conv_shapes(config.base_filters, config.num_classes, 1));
    out
}

/// Tensor names, in [`UNetParams::tensors`] order.
pub fn tensor_names(config: &UNetConfig) -> Vec<String> {
    let mut prefixes = Vec::new();
    for l in 0..=config.depth {
        prefixes.push(format!("encoder.{l}.conv1"));
        prefixes.push(format!("encoder.{l}.conv2"));
    }
    for l in 0..config.depth {
        for part in ["up", "conv1", "conv2"] {
            prefixes.push(format!("decoder.{l}.{part}"));
        }
    }
    prefixes.push("head".into());
    prefixes
        .into_iter()
        .flat_map(|p| [format!("{p}.weight"), format!("{p}.bias")])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> Conv<F> {
    /// He-style uniform init on fan-in, zero bias.
    fn init<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (cin * k * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = cout * cin * k * k * k;
        let data = (0..n).map(|_| F::of(rng.random_range(-bound..bound))).collect();
        Conv {
            weight: Tensor::from_vec(&[cout, cin, k, k, k], data).unwrap(),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn zeros_like(&self) -> Self {
        Conv {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        conv3d_forward(x, &self.weight, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<F> {
    pub conv1: Conv<F>,
    pub conv2: Conv<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock<F> {
    pub up: Conv<F>,
    pub conv1: Conv<F>,
    pub conv2: Conv<F>,
}

/// All weights of one U-Net. `encoder` is the descending path (down blocks plus the
/// bottleneck, `depth + 1` blocks); `decoder[l]` brings level `l + 1` back to level `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<F> {
    pub config: UNetConfig,
    pub encoder: Vec<ConvBlock<F>>,
    pub decoder: Vec<UpBlock<F>>,
    pub head: Conv<F>,
}

impl<F: Scalar> UNetParams<F> {
    pub fn init<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self, NnError> {
        config.validate()?;
        let encoder = Self::init_encoder(&config, rng);
        let (decoder, head) = Self::init_decoder(&config, rng);
        Ok(UNetParams {
            config,
            encoder,
            decoder,
            head,
        })
    }

    pub(crate) fn init_encoder<R: Rng + ?Sized>(config: &UNetConfig, rng: &mut R) -> Vec<ConvBlock<F>> {
        (0..=config.depth)
            .map(|l| {
                let cin = if l == 0 {
                    config.in_channels
                } else {
                    config.filters(l - 1)
                };
                let f = config.filters(l);
                ConvBlock {
                    conv1: Conv::init(cin, f, 3, rng),
                    conv2: Conv::init(f, f, 3, rng),
                }
            })
            .collect()
    }

    pub(crate) fn init_decoder<R: Rng + ?Sized>(config: &UNetConfig, rng: &mut R) -> (Vec<UpBlock<F>>, Conv<F>) {
        let decoder = (0..config.depth)
            .map(|l| {
                let f = config.filters(l);
                UpBlock {
                    up: Conv::init(config.filters(l + 1), f, 3, rng),
                    conv1: Conv::init(2 * f, f, 3, rng),
                    conv2: Conv::init(f, f, 3, rng),
                }
            })
            .collect();
        let head = Conv::init(config.base_filters, config.num_classes, 1, rng);
        (decoder, head)
    }

    pub fn zeros_like(&self) -> Self {
        UNetParams {
            config: self.config,
            encoder: self
                .encoder
                .iter()
                .map(|b| ConvBlock {
                    conv1: b.conv1.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|b| UpBlock {
                    up: b.up.zeros_like(),
                    conv1: b.conv1.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Every tensor with its name, in the order of [`UNetParams::tensors`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        tensor_names(&self.config).into_iter().zip(self.tensors()).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for b in &self.encoder {
            out.extend([&b.conv1.weight, &b.conv1.bias, &b.conv2.weight, &b.conv2.bias]);
        }
        for b in &self.decoder {
            out.extend([
                &b.up.weight,
                &b.up.bias,
                &b.conv1.weight,
                &b.conv1.bias,
                &b.conv2.weight,
                &b.conv2.bias,
            ]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for b in &mut self.encoder {
            out.extend([
                &mut b.conv1.weight,
                &mut b.conv1.bias,
                &mut b.conv2.weight,
                &mut b.conv2.bias,
            ]);
        }
        for b in &mut self.decoder {
            out.extend([
                &mut b.up.weight,
                &mut b.up.bias,
                &mut b.conv1.weight,
                &mut b.conv1.bias,
                &mut b.conv2.weight,
                &mut b.conv2.bias,
            ]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> UNetParams<G> {
        let conv = |c: &Conv<F>| Conv {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        UNetParams {
            config: self.config,
            encoder: self
                .encoder
                .iter()
                .map(|b| ConvBlock {
                    conv1: conv(&b.conv1),
                    conv2: conv(&b.conv2),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|b| UpBlock {
                    up: conv(&b.up),
                    conv1: conv(&b.conv1),
                    conv2: conv(&b.conv2),
                })
                .collect(),
            head: conv(&self.head),
        }
    }

    /// Check that every tensor has the shape implied by `config`.
    pub fn check_config(&self, config: &UNetConfig) -> Result<(), NnError> {
        if self.config != *config {
            return Err(NnError::Config(format!(
                "parameters built for {:?}, expected {:?}",
                self.config, config
            )));
        }
        let expected = tensor_shapes(config);
        let ours = self.tensors();
        if ours.len() != expected.len() || ours.iter().zip(&expected).any(|(a, b)| a.shape() != &b[..]) {
            return Err(NnError::Config("tensor shapes do not match the configuration".into()));
        }
        Ok(())
    }
}

/// How dropout behaves during a forward pass.
pub enum Dropout<'a, R: ?Sized> {
    /// No dropout (deterministic evaluation).
    Off,
    /// Fresh masks drawn from the RNG (training and MC-dropout inference).
    Sample(&'a mut R),
    /// Reuse previously recorded masks, one per encoder level.
    Replay(&'a [Option<Tensor<f64>>]),
}

/// Forward mode of [`unet_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    EvalStochastic,
    EvalDeterministic,
}

struct EncCache<F> {
    input: Tensor<F>,
    h1: Tensor<F>,
    h2: Tensor<F>,
    mask: Option<Tensor<F>>,
    pool: Option<(Vec<usize>, Vec<u32>)>,
}

struct DecCache<F> {
    upsampled: Tensor<F>,
    u: Tensor<F>,
    cat: Tensor<F>,
    h1: Tensor<F>,
    h2: Tensor<F>,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache<F> {
    enc: Vec<EncCache<F>>,
    dec: Vec<DecCache<F>>,
    head_in: Tensor<F>,
    pub probs: Tensor<F>,
}

impl<F: Scalar> ForwardCache<F> {
    /// Dropout masks used in this pass, per encoder level, as `f64` for replay.
    pub fn masks(&self) -> Vec<Option<Tensor<f64>>> {
        self.enc.iter().map(|e| e.mask.as_ref().map(|m| m.cast())).collect()
    }
}

fn check_input<F: Scalar>(params: &UNetParams<F>, input: &Tensor<F>) -> Result<(), NnError> {
    let [c, z, y, x] = input.dims4()?;
    if c != params.config.in_channels {
        return Err(NnError::ChannelMismatch {
            expected: params.config.in_channels,
            found: c,
        });
    }
    params.config.check_spatial([x, y, z])
}

/// Forward pass that records everything the backward pass needs.
pub fn forward_with_cache<F: Scalar, R: Rng + ?Sized>(
    params: &UNetParams<F>,
    input: &Tensor<F>,
    mut dropout: Dropout<'_, R>,
) -> Result<ForwardCache<F>, NnError> {
    check_input(params, input)?;
    let depth = params.config.depth;
    let rate = params.config.dropout_rate;
    let mut enc = Vec::with_capacity(depth + 1);
    let mut x = input.clone();
    for (l, block) in params.encoder.iter().enumerate() {
        let h1 = relu(&block.conv1.forward(&x)?);
        let h2 = relu(&block.conv2.forward(&h1)?);
        let mask = match &mut dropout {
            Dropout::Off => None,
            Dropout::Sample(rng) if rate > 0.0 => Some(dropout_mask::<F, R>(h2.shape(), rate, rng)),
            Dropout::Sample(_) => None,
            Dropout::Replay(masks) => match masks.get(l) {
                Some(Some(m)) if m.shape() == h2.shape() => Some(m.cast()),
                Some(None) => None,
                _ => return Err(NnError::Shape(format!("no replay mask for level {l}"))),
            },
        };
        let out = match &mask {
            Some(m) => mul_elementwise(&h2, m),
            None => h2.clone(),
        };
        let (next, pool) = if l < depth {
            let (p, arg) = maxpool3d(&out)?;
            (p, Some((out.shape().to_vec(), arg)))
        } else {
            (out.clone(), None)
        };
        enc.push(EncCache {
            input: std::mem::replace(&mut x, next),
            h1,
            h2,
            mask,
            pool,
        });
    }
    // x now holds the bottleneck output
    let mut dec: Vec<Option<DecCache<F>>> = (0..depth).map(|_| None).collect();
    for l in (0..depth).rev() {
        let block = &params.decoder[l];
        let skip = skip_output(&enc[l]);
        let (u_pre, upsampled) = upsample_conv(&x, &block.up.weight, &block.up.bias)?;
        let u = relu(&u_pre);
        let cat = concat_channels(&skip, &u)?;
        let h1 = relu(&block.conv1.forward(&cat)?);
        let h2 = relu(&block.conv2.forward(&h1)?);
        x = h2.clone();
        dec[l] = Some(DecCache {
            upsampled,
            u,
            cat,
            h1,
            h2,
        });
    }
    let logits = params.head.forward(&x)?;
    let probs = softmax_channels(&logits)?;
    Ok(ForwardCache {
        enc,
        dec: dec.into_iter().map(|d| d.expect("filled")).collect(),
        head_in: x,
        probs,
    })
}

fn skip_output<F: Scalar>(e: &EncCache<F>) -> Tensor<F> {
    match &e.mask {
        Some(m) => mul_elementwise(&e.h2, m),
        None => e.h2.clone(),
    }
}

/// Gradients of all parameters given `dL/dprobs`.
#[allow(clippy::needless_range_loop)]
pub fn backward<F: Scalar>(
    params: &UNetParams<F>,
    cache: &ForwardCache<F>,
    grad_probs: &Tensor<F>,
) -> Result<UNetParams<F>, NnError> {
    let depth = params.config.depth;
    let mut grads = params.zeros_like();

    let g_logits = softmax_channels_backward(&cache.probs, grad_probs);
    let hg = conv3d_backward_impl(&cache.head_in, &params.head.weight, &g_logits, true)?;
    grads.head.weight = hg.weight;
    grads.head.bias = hg.bias;
    let mut g = hg.input.expect("requested");

    let mut skip_grads: Vec<Option<Tensor<F>>> = (0..depth).map(|_| None).collect();
    for l in 0..depth {
        let block = &params.decoder[l];
        let c = &cache.dec[l];
        let g_h2 = relu_backward(&c.h2, &g);
        let g2 = conv3d_backward_impl(&c.h1, &block.conv2.weight, &g_h2, true)?;
        let g_h1 = relu_backward(&c.h1, g2.input.as_ref().unwrap());
        let g1 = conv3d_backward_impl(&c.cat, &block.conv1.weight, &g_h1, true)?;
        let (g_skip, g_u) = split_channels(g1.input.as_ref().unwrap(), params.config.filters(l))?;
        let g_u = relu_backward(&c.u, &g_u);
        let gu = upsample_conv_backward(&c.upsampled, &block.up.weight, &g_u)?;
        skip_grads[l] = Some(g_skip);
        let gb = &mut grads.decoder[l];
        gb.conv2 = Conv {
            weight: g2.weight,
            bias: g2.bias,
        };
        gb.conv1 = Conv {
            weight: g1.weight,
            bias: g1.bias,
        };
        gb.up = Conv {
            weight: gu.weight,
            bias: gu.bias,
        };
        g = gu.input.expect("requested");
    }

    // g is now the gradient at the bottleneck output
    for l in (0..=depth).rev() {
        let block = &params.encoder[l];
        let e = &cache.enc[l];
        let mut g_out = if l == depth {
            g.clone()
        } else {
            let (shape, arg) = e.pool.as_ref().expect("pooled level");
            let mut from_pool = maxpool3d_backward(shape, arg, &g)?;
            add_assign(&mut from_pool, skip_grads[l].as_ref().unwrap());
            from_pool
        };
        if let Some(m) = &e.mask {
            g_out = mul_elementwise(&g_out, m);
        }
        let g_a2 = relu_backward(&e.h2, &g_out);
        let g2 = conv3d_backward_impl(&e.h1, &block.conv2.weight, &g_a2, true)?;
        let g_a1 = relu_backward(&e.h1, g2.input.as_ref().unwrap());
        let g1 = conv3d_backward_impl(&e.input, &block.conv1.weight, &g_a1, l > 0)?;
        grads.encoder[l] = ConvBlock {
            conv1: Conv {
                weight: g1.weight,
                bias: g1.bias,
            },
            conv2: Conv {
                weight: g2.weight,
                bias: g2.bias,
            },
        };
        if l > 0 {
            g = g1.input.expect("requested");
        }
    }
    Ok(grads)
}

/// Per-class probabilities `(num_classes, Z, Y, X)`.
pub fn unet_forward<F: Scalar, R: Rng + ?Sized>(
    params: &UNetParams<F>,
    input: &Tensor<F>,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<F>, NnError> {
    let dropout = match mode {
        Mode::Train | Mode::EvalStochastic => Dropout::Sample(rng),
        Mode::EvalDeterministic => Dropout::Off,
    };
    Ok(forward_with_cache(params, input, dropout)?.probs)
}
