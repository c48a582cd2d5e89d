//! Register-and-average reference reconstruction.

use crate::error::{Error, Result};
use crate::geometry::transform::TransformParams;
use crate::geometry::warp;
use crate::image::Image;
use crate::sensor::FrameStack;

/// Mean of the frames after undoing each frame's transform, per pixel over
/// the frames whose back-warped sample is in bounds. `transforms` are in
/// sensor pixels; pixels no frame covers fall back to frame 0.
pub fn average_baseline(stack: &FrameStack, transforms: &[TransformParams]) -> Result<Image> {
    let first = stack.frames.first().ok_or(Error::EmptyStack)?;
    if transforms.len() != stack.len() {
        return Err(Error::Config(format!(
            "{} transforms for {} frames",
            transforms.len(),
            stack.len()
        )));
    }
    let (w, h) = first.dims();
    // Running means reproduce identical frames exactly.
    let mut mean = first.data().to_vec();
    let mut count = vec![0u32; w * h];
    for (f, t) in stack.frames.iter().zip(transforms) {
        let (back, mask) = warp(f, &t.inverse()?)?;
        for i in 0..w * h {
            if mask[i] {
                count[i] += 1;
                let v = back.data()[i];
                mean[i] = if count[i] == 1 { v } else { mean[i] + (v - mean[i]) / count[i] as f64 };
            }
        }
    }
    Image::from_vec(w, h, mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_average_to_the_frame() {
        let f = Image::from_fn(16, 16, |x, y| (x * 3 + y) as f64 * 0.1);
        let stack = FrameStack::from_frames(vec![f.clone(); 4]).unwrap();
        let ts = vec![TransformParams::translation(0.0, 0.0); 4];
        assert_eq!(average_baseline(&stack, &ts).unwrap(), f);
    }

    #[test]
    fn empty_stack_errors() {
        let stack = FrameStack {
            frames: vec![],
            masks: vec![],
            downsample: 1,
            truth: None,
        };
        assert!(average_baseline(&stack, &[]).is_err());
    }
}
