use image::{Rgb, RgbImage};
use pathground::BoundingBox;

const COLOR: Rgb<u8> = Rgb([255, 32, 32]);
const THICKNESS: u32 = 2;

/// Copy of `image` with the box outline drawn, clipped to the image.
pub fn draw_box(image: &RgbImage, b: &BoundingBox) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = out.dimensions();
    let c = b.clamped_corners();
    let px = |v: f64, n: u32| ((v * n as f64).round() as i64).clamp(0, n as i64 - 1) as u32;
    let (x0, x1) = (px(c.x0, w), px(c.x1, w));
    let (y0, y1) = (px(c.y0, h), px(c.y1, h));
    for t in 0..THICKNESS {
        for x in x0..=x1 {
            out.put_pixel(x, (y0 + t).min(h - 1), COLOR);
            out.put_pixel(x, y1.saturating_sub(t), COLOR);
        }
        for y in y0..=y1 {
            out.put_pixel((x0 + t).min(w - 1), y, COLOR);
            out.put_pixel(x1.saturating_sub(t), y, COLOR);
        }
    }
    out
}
