//! Shared-trunk U-Net with a segmentation head and a reconstruction head,
//! plus the parameter utilities of the student/teacher pair.

pub mod layers;
mod params;
mod unet;

pub use params::{ema_update, Architecture, Grads, NetworkParams, ParamTensor, Sgd};

use layers::Feat;
use unet::TrunkCache;

use crate::error::{shape_err, Result};
use crate::types::{Image, LabelMask, ProbMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// `classes` logits per pixel.
    Seg,
    /// `in_channels` sigmoid outputs per pixel.
    Recon,
}

/// One forward pass with everything needed to run it backwards.
pub struct Forward {
    head: Head,
    feat: Feat,
    cache: TrunkCache,
    output: Feat,
}

impl Forward {
    pub fn head(&self) -> Head {
        self.head
    }

    /// Raw head output, planar.
    pub fn output(&self) -> &[f32] {
        &self.output.data
    }

    pub fn probs(&self) -> Result<ProbMap> {
        debug_assert_eq!(self.head, Head::Seg);
        ProbMap::softmax(self.output.c, self.output.h, self.output.w, &self.output.data)
    }

    pub fn recon_image(&self) -> Result<Image> {
        debug_assert_eq!(self.head, Head::Recon);
        Image::new(
            self.output.h,
            self.output.w,
            self.output.c,
            self.output.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

fn to_feat(params: &NetworkParams, img: &Image) -> Result<Feat> {
    let arch = params.arch();
    if img.channels() != arch.in_channels {
        return Err(shape_err(format!(
            "network expects {} input channels, image has {}",
            arch.in_channels,
            img.channels()
        )));
    }
    let stride = arch.stride();
    if img.height() % stride != 0 || img.width() % stride != 0 || img.height() < stride || img.width() < stride {
        return Err(shape_err(format!(
            "{}x{} input is incompatible with network stride {stride}",
            img.height(),
            img.width()
        )));
    }
    Ok(Feat {
        c: img.channels(),
        h: img.height(),
        w: img.width(),
        data: img.data().iter().map(|&v| v as f32).collect(),
    })
}

pub fn forward(params: &NetworkParams, img: &Image, head: Head) -> Result<Forward> {
    let x = to_feat(params, img)?;
    let (feat, cache) = unet::trunk_forward(params, x);
    let output = match head {
        Head::Seg => unet::seg_head(params, &feat),
        Head::Recon => unet::rec_head(params, &feat),
    };
    Ok(Forward {
        head,
        feat,
        cache,
        output,
    })
}

/// Parameter gradients given the gradient with respect to the head output
/// (logits for [`Head::Seg`], bounded reconstruction for [`Head::Recon`]).
pub fn backward(params: &NetworkParams, fwd: &Forward, grad_output: &[f64]) -> Result<Grads> {
    if grad_output.len() != fwd.output.data.len() {
        return Err(shape_err("output gradient does not match the head output"));
    }
    let dout = Feat {
        c: fwd.output.c,
        h: fwd.output.h,
        w: fwd.output.w,
        data: grad_output.iter().map(|&v| v as f32).collect(),
    };
    let mut grads = params.zeros_like();
    let dfeat = match fwd.head {
        Head::Seg => unet::seg_head_backward(params, &fwd.feat, &dout, &mut grads),
        Head::Recon => unet::rec_head_backward(params, &fwd.feat, &fwd.output, &dout, &mut grads),
    };
    unet::trunk_backward(params, &fwd.cache, dfeat, &mut grads);
    Ok(grads)
}

/// Softmax class probabilities.
pub fn forward_seg(params: &NetworkParams, img: &Image) -> Result<ProbMap> {
    forward(params, img, Head::Seg)?.probs()
}

/// Sigmoid-bounded reconstruction with the input's channel count.
pub fn forward_recon(params: &NetworkParams, sketch: &Image) -> Result<Image> {
    forward(params, sketch, Head::Recon)?.recon_image()
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_labels(p: &ProbMap) -> LabelMask {
    let (h, w) = (p.height(), p.width());
    let n = h * w;
    let d = p.data();
    let data = (0..n)
        .map(|i| {
            let mut best = 0usize;
            for k in 1..p.classes() {
                if d[k * n + i] > d[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, data).expect("shape preserved")
}
