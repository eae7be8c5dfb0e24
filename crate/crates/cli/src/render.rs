//! Overlay images: masks tinted in their palette colour, the predicted
//! region outlined.

use cycletrack_core::data::mask_palette;
use cycletrack_core::{Annotation, BinaryMask};
use image::{Rgb, RgbImage};

const OUTLINE: Rgb<u8> = Rgb([0, 255, 0]);

pub fn overlay(frame: &RgbImage, region: Option<&Annotation>, masks: &[&BinaryMask]) -> RgbImage {
    let mut img = frame.clone();
    let palette = mask_palette();
    for m in masks {
        let i = m.instance as usize * 3;
        let colour = [palette[i], palette[i + 1], palette[i + 2]];
        for r in 0..m.height.min(img.height() as usize) {
            for c in 0..m.width.min(img.width() as usize) {
                if m.get(r, c) {
                    let px = img.get_pixel_mut(c as u32, r as u32);
                    for k in 0..3 {
                        px.0[k] = ((px.0[k] as u16 + colour[k] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    if let Some(region) = region {
        let poly = region.polygon();
        for i in 0..poly.len() {
            draw_segment(&mut img, poly[i], poly[(i + 1) % poly.len()]);
        }
    }
    img
}

fn draw_segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64)) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).clamp(1, 100_000);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = ((a.0 + t * (b.0 - a.0)).round(), (a.1 + t * (b.1 - a.1)).round());
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, OUTLINE);
        }
    }
}
