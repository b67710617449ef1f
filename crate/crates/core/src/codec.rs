//! Convolutional frame encoder and decoder.
//!
//! The encoder maps `N×Cin×H×W` to `N×4C×H/4×W/4` through three 3×3
//! convolutions (the last two with stride 2), each followed by a leaky ReLU.
//! The decoder mirrors it with nearest-neighbour upsampling and ends in a
//! sigmoid head, so decoded values always lie in `[0, 1]`.
//!
//! Convolutions pad by edge replication, which keeps constant inputs constant
//! through both halves.

use alloc::format;

use crate::numerics::{Real, Tape, Var};
use crate::params::{Bindings, Conv2d, Conv2dSpec, Init, ParamStore};
use crate::rng::SplitMix64;
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub in_channels: usize,
    /// `C`; the latent has `4C` channels.
    pub base_channels: usize,
}

impl EncoderSpec {
    pub fn out_channels(&self) -> usize {
        4 * self.base_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderSpec {
    pub base_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    convs: [Conv2d; 3],
}

impl Encoder {
    pub fn new<T: Real>(name: &str, spec: EncoderSpec, store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Self {
        let c = spec.base_channels;
        let convs = [
            Conv2dSpec::new(format!("{name}.conv0"), spec.in_channels, c, 3).build(store, rng),
            Conv2dSpec::new(format!("{name}.conv1"), c, 2 * c, 3).stride(2).build(store, rng),
            Conv2dSpec::new(format!("{name}.conv2"), 2 * c, 4 * c, 3).stride(2).build(store, rng),
        ];
        Self { spec, convs }
    }

    pub fn encode_frames<T: Real>(&self, tape: &mut Tape<T>, params: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Contract(format!(
                "encoder expects N×{}×H×W, got {:?}",
                self.spec.in_channels, shape
            )));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Config(format!("frame size {}×{} is not divisible by 4", shape[2], shape[3])));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, params, h)?;
            h = tape.leaky_relu(h, T::from_f64(LEAKY_SLOPE))?;
        }
        Ok(h)
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub spec: DecoderSpec,
    convs: [Conv2d; 3],
}

impl Decoder {
    pub fn new<T: Real>(name: &str, spec: DecoderSpec, store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Self {
        let c = spec.base_channels;
        let convs = [
            Conv2dSpec::new(format!("{name}.conv0"), 4 * c, 2 * c, 3).build(store, rng),
            Conv2dSpec::new(format!("{name}.conv1"), 2 * c, c, 3).build(store, rng),
            Conv2dSpec::new(format!("{name}.head"), c, spec.out_channels, 3).init(Init::Fan).build(store, rng),
        ];
        Self { spec, convs }
    }

    /// `N×4C×h×w` to `N×out×4h×4w`, values in `[0, 1]`.
    pub fn decode_frames<T: Real>(&self, tape: &mut Tape<T>, params: &Bindings, f: Var) -> Result<Var> {
        let shape = tape.shape(f);
        if shape.len() != 4 || shape[1] != 4 * self.spec.base_channels {
            return Err(Error::Contract(format!(
                "decoder expects N×{}×h×w, got {:?}",
                4 * self.spec.base_channels,
                shape
            )));
        }
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut h = f;
        for conv in &self.convs[..2] {
            h = tape.upsample_nearest(h, 2)?;
            h = conv.forward(tape, params, h)?;
            h = tape.leaky_relu(h, slope)?;
        }
        let h = self.convs[2].forward(tape, params, h)?;
        tape.sigmoid(h)
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Array;

    fn build(c: usize) -> (ParamStore<f64>, Encoder, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(3);
        let enc = Encoder::new("enc", EncoderSpec { in_channels: 3, base_channels: c }, &mut store, &mut rng);
        let dec = Decoder::new("dec", DecoderSpec { base_channels: c, out_channels: 3 }, &mut store, &mut rng);
        (store, enc, dec)
    }

    #[test]
    fn indivisible_frame_size_is_a_config_error() {
        let (store, enc, _) = build(2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Array::zeros(&[1, 3, 10, 12]));
        assert!(matches!(enc.encode_frames(&mut tape, &p, x), Err(Error::Config(_))));
    }

    #[test]
    fn decoder_rejects_wrong_channel_count() {
        let (store, _, dec) = build(2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let f = tape.constant(Array::zeros(&[1, 4, 2, 2]));
        assert!(matches!(dec.decode_frames(&mut tape, &p, f), Err(Error::Contract(_))));
    }

    #[test]
    fn round_trip_preserves_shape() {
        let (store, enc, dec) = build(2);
        for (h, w) in [(4, 4), (8, 12), (16, 8)] {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = tape.constant(Array::full(&[3, 3, h, w], 0.3));
            let f = enc.encode_frames(&mut tape, &p, x).unwrap();
            assert_eq!(tape.shape(f), [3, 8, h / 4, w / 4]);
            let y = dec.decode_frames(&mut tape, &p, f).unwrap();
            assert_eq!(tape.shape(y), [3, 3, h, w]);
            assert!(tape.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
