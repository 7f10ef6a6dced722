use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    pixel_shuffle_batch, pixel_unshuffle_batch, Activation, ActivationKind, BatchNorm2d, Conv2d, ConvTranspose2d,
    MaxPool2d, Parameter,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channels of one latent.
pub const LATENT_CHANNELS: usize = 4;
/// Noise and reference latent concatenated.
pub const INPUT_CHANNELS: usize = 2 * LATENT_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    PixelShuffle,
    TransposedConv,
}

impl Upsample {
    pub fn name(self) -> &'static str {
        match self {
            Upsample::PixelShuffle => "pixel_shuffle",
            Upsample::TransposedConv => "transposed_conv",
        }
    }
}

impl std::str::FromStr for Upsample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel_shuffle" => Ok(Upsample::PixelShuffle),
            "transposed_conv" => Ok(Upsample::TransposedConv),
            other => Err(Error::Config(format!("unknown upsampling '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdnConfig {
    pub height: usize,
    pub width: usize,
    /// Encoder feature channels at 1/2, 1/4 and 1/8 of the latent size.
    pub channels: [usize; 3],
    pub upsample: Upsample,
    /// The noise input is divided by this before entering the encoder.
    pub noise_scale: f64,
    /// The head output is multiplied by this to give `S_pred`.
    pub residual_scale: f64,
}

impl EdnConfig {
    pub fn new(height: usize, width: usize, channels: [usize; 3]) -> Self {
        Self {
            height,
            width,
            channels,
            upsample: Upsample::PixelShuffle,
            noise_scale: 1.0,
            residual_scale: 1.0,
        }
    }

    /// Full-size channel counts `(64, 64, 128)`.
    pub fn full(height: usize, width: usize) -> Self {
        Self::new(height, width, [64, 64, 128])
    }

    pub fn desk(height: usize, width: usize) -> Self {
        Self::new(height, width, [16, 16, 32])
    }

    pub fn micro(height: usize, width: usize) -> Self {
        Self::new(height, width, [8, 8, 16])
    }

    pub fn with_upsample(mut self, upsample: Upsample) -> Self {
        self.upsample = upsample;
        self
    }

    pub fn with_scales(mut self, noise_scale: f64, residual_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self.residual_scale = residual_scale;
        self
    }

    /// Width of the last decoder stage before the output head.
    pub fn decoder_width(&self) -> usize {
        (self.channels[0] / 2).max(LATENT_CHANNELS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Config(format!(
                "latent size {}x{} must be a positive multiple of 8",
                self.height, self.width
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.noise_scale) || !positive(self.residual_scale) {
            return Err(Error::Config("noise and residual scales must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [LATENT_CHANNELS, self.height, self.width]
    }

    /// Shapes of the three encoder feature maps for one sample.
    pub fn feature_shapes(&self) -> [[usize; 3]; 3] {
        let [c1, c2, c3] = self.channels;
        let (h, w) = (self.height, self.width);
        [[c1, h / 2, w / 2], [c2, h / 4, w / 4], [c3, h / 8, w / 8]]
    }
}

#[derive(Clone, Debug)]
struct Shortcut<T: Scalar> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

/// Residual block: the conv/norm branch and the shortcut branch run in
/// parallel and are summed before the final ReLU.
#[derive(Clone, Debug)]
struct BasicBlock<T: Scalar> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    act1: Activation<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Option<Shortcut<T>>,
    act_out: Activation<T>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| Shortcut {
            conv: Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng),
            bn: BatchNorm2d::new(out_ch),
        });
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(out_ch),
            act1: Activation::new(ActivationKind::Relu),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_ch),
            shortcut,
            act_out: Activation::new(ActivationKind::Relu),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.act1.infer(&self.bn1.infer(&self.conv1.infer(x)?)?);
        let main = self.bn2.infer(&self.conv2.infer(&h)?)?;
        let side = match &self.shortcut {
            Some(s) => s.bn.infer(&s.conv.infer(x)?)?,
            None => x.clone(),
        };
        Ok(self.act_out.infer(&main.add(&side)?))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward_train(x)?;
        let h = self.bn1.forward_train(&h)?;
        let h = self.act1.forward_train(&h);
        let h = self.conv2.forward_train(&h)?;
        let main = self.bn2.forward_train(&h)?;
        let side = match &mut self.shortcut {
            Some(s) => {
                let y = s.conv.forward_train(x)?;
                s.bn.forward_train(&y)?
            }
            None => x.clone(),
        };
        Ok(self.act_out.forward_train(&main.add(&side)?))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.act_out.backward(grad_out)?;
        let gm = self.bn2.backward(&g)?;
        let gm = self.conv2.backward(&gm)?;
        let gm = self.act1.backward(&gm)?;
        let gm = self.bn1.backward(&gm)?;
        let gx = self.conv1.backward(&gm)?;
        let gs = match &mut self.shortcut {
            Some(s) => {
                let gs = s.bn.backward(&g)?;
                s.conv.backward(&gs)?
            }
            None => g,
        };
        gx.add(&gs)
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some(s) = &mut self.shortcut {
            v.extend(s.conv.params_mut());
            v.extend(s.bn.params_mut());
        }
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some(s) = &mut self.shortcut {
            v.push(&mut s.bn);
        }
        v
    }
}

/// One decoder upsampling stage (factor 2).
#[derive(Clone, Debug)]
enum UpStage<T: Scalar> {
    Shuffle { conv: Conv2d<T>, act: Activation<T> },
    Transposed { deconv: ConvTranspose2d<T>, act: Activation<T> },
}

impl<T: Scalar> UpStage<T> {
    fn new(in_ch: usize, out_ch: usize, kind: Upsample, rng: &mut ChaCha8Rng) -> Self {
        let act = Activation::new(ActivationKind::Elu);
        match kind {
            Upsample::PixelShuffle => UpStage::Shuffle {
                conv: Conv2d::new(in_ch, out_ch * 4, 3, 1, 1, true, rng),
                act,
            },
            Upsample::TransposedConv => UpStage::Transposed {
                deconv: ConvTranspose2d::new(in_ch, out_ch, 2, rng),
                act,
            },
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            UpStage::Shuffle { conv, act } => pixel_shuffle_batch(&act.infer(&conv.infer(x)?), 2),
            UpStage::Transposed { deconv, act } => Ok(act.infer(&deconv.infer(x)?)),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            UpStage::Shuffle { conv, act } => {
                let y = conv.forward_train(x)?;
                pixel_shuffle_batch(&act.forward_train(&y), 2)
            }
            UpStage::Transposed { deconv, act } => {
                let y = deconv.forward_train(x)?;
                Ok(act.forward_train(&y))
            }
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            UpStage::Shuffle { conv, act } => {
                let g = pixel_unshuffle_batch(grad_out, 2)?;
                conv.backward(&act.backward(&g)?)
            }
            UpStage::Transposed { deconv, act } => deconv.backward(&act.backward(grad_out)?),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            UpStage::Shuffle { conv, .. } => conv.params_mut(),
            UpStage::Transposed { deconv, .. } => deconv.params_mut(),
        }
    }
}

/// Encoder-decoder mapping random noise and the reference latent to the
/// semantic residual `S`.
///
/// Encoder: 3x3 stride-2 stem with norm and ReLU (`f1`, 1/2 size), max-pool
/// and two residual blocks (`f2`, 1/4), two residual blocks with the first
/// strided (`f3`, 1/8). Decoder: conv + ELU + pixel shuffle stages, each
/// followed by concatenation with `f2` and then `f1`, a final upsampling
/// stage to full size, and a 3x3 output head.
#[derive(Clone, Debug)]
pub struct EdnModel<T: Scalar> {
    config: EdnConfig,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stem_act: Activation<T>,
    pool: MaxPool2d,
    layer1: [BasicBlock<T>; 2],
    layer2: [BasicBlock<T>; 2],
    up1: UpStage<T>,
    up2: UpStage<T>,
    up3: UpStage<T>,
    head: Conv2d<T>,
}

impl<T: Scalar> EdnModel<T> {
    pub fn new(config: EdnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = config.channels;
        let d = config.decoder_width();
        let kind = config.upsample;
        Ok(Self {
            config,
            stem_conv: Conv2d::new(INPUT_CHANNELS, c1, 3, 2, 1, false, &mut rng),
            stem_bn: BatchNorm2d::new(c1),
            stem_act: Activation::new(ActivationKind::Relu),
            pool: MaxPool2d::new(),
            layer1: [
                BasicBlock::new(c1, c2, 1, &mut rng),
                BasicBlock::new(c2, c2, 1, &mut rng),
            ],
            layer2: [
                BasicBlock::new(c2, c3, 2, &mut rng),
                BasicBlock::new(c3, c3, 1, &mut rng),
            ],
            up1: UpStage::new(c3, c2, kind, &mut rng),
            up2: UpStage::new(2 * c2, c1, kind, &mut rng),
            up3: UpStage::new(2 * c1, d, kind, &mut rng),
            head: Conv2d::new(d, LATENT_CHANNELS, 3, 1, 1, true, &mut rng),
        })
    }

    /// A model whose every parameter is zero; its output is identically zero.
    pub fn zeros(config: EdnConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for p in m.params_mut() {
            p.value.data_mut().fill(T::zero());
        }
        Ok(m)
    }

    pub fn config(&self) -> &EdnConfig {
        &self.config
    }

    /// Zeroes the output convolution so the untrained model predicts a zero
    /// residual while the body keeps its random initialization.
    pub fn zero_head(&mut self) {
        for p in self.head.params_mut() {
            p.value.data_mut().fill(T::zero());
        }
    }

    fn check_input(&self, z: &Tensor<T>, i: &Tensor<T>) -> Result<usize> {
        z.ensure_same_shape(i, "edn_forward")?;
        let [c, h, w] = self.config.latent_shape();
        match *z.shape() {
            [n, zc, zh, zw] if zc == c && zh == h && zw == w => Ok(n),
            _ => Err(Error::Dimension {
                op: "edn_forward (expected [N, 4, h, w])",
                lhs: vec![0, c, h, w],
                rhs: z.shape().to_vec(),
            }),
        }
    }

    /// Evaluation-mode forward of a batch `[N, 4, h, w]`.
    pub fn infer_batch(&self, z: &Tensor<T>, i: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(z, i)?;
        let x = self.input(z, i)?;
        let f1 = self.stem_act.infer(&self.stem_bn.infer(&self.stem_conv.infer(&x)?)?);
        let mut f2 = self.pool.infer(&f1)?;
        for b in &self.layer1 {
            f2 = b.infer(&f2)?;
        }
        let mut f3 = f2.clone();
        for b in &self.layer2 {
            f3 = b.infer(&f3)?;
        }
        let u = Tensor::concat_axis1(&self.up1.infer(&f3)?, &f2)?;
        let u = Tensor::concat_axis1(&self.up2.infer(&u)?, &f1)?;
        let u = self.up3.infer(&u)?;
        Ok(self.head.infer(&u)?.scale(T::lit(self.config.residual_scale)))
    }

    fn input(&self, z: &Tensor<T>, i: &Tensor<T>) -> Result<Tensor<T>> {
        Tensor::concat_axis1(&z.scale(T::lit(1.0 / self.config.noise_scale)), i)
    }

    /// `S_pred` for one noise latent `4 x h x w` and its reference.
    pub fn forward(&self, z: &Tensor<T>, i: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer_batch(&z.unsqueeze0(), &i.unsqueeze0())?;
        y.reshape(&self.config.latent_shape())
    }

    /// Training-mode forward (batch statistics, caches for backward).
    pub fn forward_train(&mut self, z: &Tensor<T>, i: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(z, i)?;
        let x = self.input(z, i)?;
        let h = self.stem_conv.forward_train(&x)?;
        let h = self.stem_bn.forward_train(&h)?;
        let f1 = self.stem_act.forward_train(&h);
        let mut f2 = self.pool.forward_train(&f1)?;
        for b in &mut self.layer1 {
            f2 = b.forward_train(&f2)?;
        }
        let mut f3 = f2.clone();
        for b in &mut self.layer2 {
            f3 = b.forward_train(&f3)?;
        }
        let u = Tensor::concat_axis1(&self.up1.forward_train(&f3)?, &f2)?;
        let u = Tensor::concat_axis1(&self.up2.forward_train(&u)?, &f1)?;
        let u = self.up3.forward_train(&u)?;
        Ok(self.head.forward_train(&u)?.scale(T::lit(self.config.residual_scale)))
    }

    /// Accumulates parameter gradients for the last `forward_train`.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<()> {
        let [c1, c2, _] = self.config.channels;
        let g = self.head.backward(&grad_out.scale(T::lit(self.config.residual_scale)))?;
        let g = self.up3.backward(&g)?;
        let (g, mut g_f1) = g.split_axis1(c1)?;
        let g = self.up2.backward(&g)?;
        let (g, mut g_f2) = g.split_axis1(c2)?;
        let mut g = self.up1.backward(&g)?;
        for b in self.layer2.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        g_f2.add_assign(&g)?;
        let mut g = g_f2;
        for b in self.layer1.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        g_f1.add_assign(&self.pool.backward(&g)?)?;
        let g = self.stem_act.backward(&g_f1)?;
        let g = self.stem_bn.backward(&g)?;
        self.stem_conv.backward(&g)?;
        Ok(())
    }

    /// Trainable parameters in declaration order.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.stem_conv.params_mut();
        v.extend(self.stem_bn.params_mut());
        for b in self.layer1.iter_mut().chain(self.layer2.iter_mut()) {
            v.extend(b.params_mut());
        }
        for u in [&mut self.up1, &mut self.up2, &mut self.up3] {
            v.extend(u.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    /// Normalization layers in declaration order; their running statistics
    /// are persisted with the parameters.
    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v = vec![&mut self.stem_bn];
        for b in self.layer1.iter_mut().chain(self.layer2.iter_mut()) {
            v.extend(b.norms_mut());
        }
        v
    }

    pub fn parameter_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// `mean(0.5 d^2 if |d| < 1 else |d| - 0.5)` with `d = pred - target`.
pub fn smooth_l1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let d = pred.sub(target)?;
    let half = T::lit(0.5);
    let total: T = d
        .data()
        .iter()
        .map(|&x| if x.abs() < T::one() { half * x * x } else { x.abs() - half })
        .sum();
    Ok(total / T::from_usize_lossy(d.len().max(1)))
}

/// Gradient of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let n = T::from_usize_lossy(pred.len().max(1));
    pred.zip_map(target, "smooth_l1", |p, t| {
        let d = p - t;
        d.max(-T::one()).min(T::one()) / n
    })
}

/// Adds the predicted residual to each view of a noise sample.
///
/// `z` is `[4, h, w]` or `[V, 4, h, w]`; the reference `i` is `[4, h, w]`.
pub fn apply_edn<T: Scalar>(model: &EdnModel<T>, z: &Tensor<T>, i: &Tensor<T>) -> Result<Tensor<T>> {
    z.add(&predict_residual(model, z, i)?)
}

/// `S_pred` for a single latent or every view of a multi-view sample.
pub fn predict_residual<T: Scalar>(model: &EdnModel<T>, z: &Tensor<T>, i: &Tensor<T>) -> Result<Tensor<T>> {
    match z.rank() {
        3 => model.forward(z, i),
        4 => {
            let refs = Tensor::stack(&vec![i.clone(); z.shape()[0]])?;
            model.infer_batch(z, &refs)
        }
        _ => Err(Error::Shape {
            op: "apply_edn",
            detail: format!("noise must be [4, h, w] or [V, 4, h, w], got {:?}", z.shape()),
        }),
    }
}
