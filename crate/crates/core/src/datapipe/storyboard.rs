//! Keyframe sampling, set-of-mark overlays, and storyboard composition.
//! All rasterization is deterministic; PNG encode/decode goes through the
//! `image` crate.

use serde::{Deserialize, Serialize};

use image::{Rgb, RgbImage};

use crate::backbone::{PromptKind, PromptSpec};
use crate::error::{Error, Result};
use crate::params::{mix64, unit_value};

pub const STORYBOARD_ROWS: usize = 2;
pub const STORYBOARD_COLS: usize = 3;
pub const STORYBOARD_FRAMES: usize = STORYBOARD_ROWS * STORYBOARD_COLS;

/// Uniform keyframe indices: idx_k = floor(k * (T-1) / (K-1)). Always
/// includes the first and last frame.
pub fn sample_keyframes(total_frames: usize, k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::input(format!("need at least 2 keyframes, got {k}")));
    }
    if total_frames < k {
        return Err(Error::input(format!(
            "cannot sample {k} keyframes from {total_frames} frames"
        )));
    }
    Ok((0..k).map(|i| i * (total_frames - 1) / (k - 1)).collect())
}

/// One region mark: the prompt geometry plus an RGB color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub region: PromptSpec,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryboardSpec {
    pub keyframes: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub marks: Vec<Mark>,
}

fn to_px(v: f64, size: u32) -> u32 {
    (v * (size - 1) as f64).round() as u32
}

/// Overlay a region mark: 2px rectangle outline for boxes, 50% alpha fill
/// for masks, a small filled square for points. Pixels outside the region
/// are untouched.
pub fn som_overlay(frame: &RgbImage, region: &PromptSpec, color: [u8; 3]) -> Result<RgbImage> {
    let (w, h) = frame.dimensions();
    let mut out = frame.clone();
    match region.kind {
        PromptKind::Box => {
            if region.coords.len() != 4 {
                return Err(Error::input("box mark needs 4 coords".to_string()));
            }
            let [x1, y1, x2, y2] = [region.coords[0], region.coords[1], region.coords[2], region.coords[3]];
            if x1 >= x2 || y1 >= y2 {
                return Err(Error::input("degenerate box mark (zero area)".to_string()));
            }
            let (px1, py1, px2, py2) = (to_px(x1, w), to_px(y1, h), to_px(x2, w), to_px(y2, h));
            for x in px1..=px2 {
                for y in py1..=py2 {
                    let on_border = x < px1 + 2 || x + 2 > px2 || y < py1 + 2 || y + 2 > py2;
                    let inside_ring = x <= px1 + 1 || x + 1 >= px2 || y <= py1 + 1 || y + 1 >= py2;
                    if on_border && inside_ring {
                        out.put_pixel(x, y, Rgb(color));
                    }
                }
            }
        }
        PromptKind::Mask => {
            let grid = region
                .mask_grid
                .as_ref()
                .ok_or_else(|| Error::input("mask mark without grid".to_string()))?;
            let g = (grid.len() as f64).sqrt() as usize;
            if g * g != grid.len() {
                return Err(Error::input("mask grid must be square".to_string()));
            }
            for y in 0..h {
                for x in 0..w {
                    let gx = (x as usize * g) / w as usize;
                    let gy = (y as usize * g) / h as usize;
                    if grid[gy * g + gx] == 1 {
                        let p = out.get_pixel(x, y).0;
                        let blended = [
                            ((p[0] as u16 + color[0] as u16) / 2) as u8,
                            ((p[1] as u16 + color[1] as u16) / 2) as u8,
                            ((p[2] as u16 + color[2] as u16) / 2) as u8,
                        ];
                        out.put_pixel(x, y, Rgb(blended));
                    }
                }
            }
        }
        PromptKind::Point => {
            if region.coords.len() != 2 {
                return Err(Error::input("point mark needs 2 coords".to_string()));
            }
            let (px, py) = (to_px(region.coords[0], w), to_px(region.coords[1], h));
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let x = px as i64 + dx;
                    let y = py as i64 + dy;
                    if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                        out.put_pixel(x as u32, y as u32, Rgb(color));
                    }
                }
            }
        }
    }
    Ok(out)
}

// 3x5 digit glyphs for cell index labels, one bit per pixel.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111], // 0
    [0b010, 0b110, 0b010, 0b010, 0b111], // 1
    [0b111, 0b001, 0b111, 0b100, 0b111], // 2
    [0b111, 0b001, 0b111, 0b001, 0b111], // 3
    [0b101, 0b101, 0b111, 0b001, 0b001], // 4
    [0b111, 0b100, 0b111, 0b001, 0b111], // 5
    [0b111, 0b100, 0b111, 0b101, 0b111], // 6
    [0b111, 0b001, 0b010, 0b010, 0b010], // 7
    [0b111, 0b101, 0b111, 0b101, 0b111], // 8
    [0b111, 0b101, 0b111, 0b001, 0b111], // 9
];

fn draw_number(img: &mut RgbImage, number: usize, x0: u32, y0: u32, color: [u8; 3]) {
    let digits: Vec<usize> = number
        .to_string()
        .bytes()
        .map(|b| (b - b'0') as usize)
        .collect();
    for (pos, &d) in digits.iter().enumerate() {
        let base_x = x0 + (pos as u32) * 4;
        for (row, bits) in DIGITS[d].iter().enumerate() {
            for col in 0..3u32 {
                if bits & (0b100 >> col) != 0 {
                    let (x, y) = (base_x + col, y0 + row as u32);
                    if x < img.width() && y < img.height() {
                        img.put_pixel(x, y, Rgb(color));
                    }
                }
            }
        }
    }
}

/// Compose exactly six equally sized frames into a 2x3 storyboard, row-major
/// temporal order, with per-cell region marks and index labels.
pub fn compose_storyboard(
    frames: &[RgbImage],
    marks: &[Mark],
    keyframes: &[usize],
) -> Result<(RgbImage, StoryboardSpec)> {
    if frames.len() != STORYBOARD_FRAMES {
        return Err(Error::input(format!(
            "storyboard needs exactly {STORYBOARD_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    if marks.len() != frames.len() {
        return Err(Error::input("one mark per frame required".to_string()));
    }
    let (w, h) = frames[0].dimensions();
    if frames.iter().any(|f| f.dimensions() != (w, h)) {
        return Err(Error::input("storyboard frames must share dimensions".to_string()));
    }
    let mut composite = RgbImage::new(w * STORYBOARD_COLS as u32, h * STORYBOARD_ROWS as u32);
    for (i, (frame, mark)) in frames.iter().zip(marks).enumerate() {
        let marked = som_overlay(frame, &mark.region, mark.color)?;
        let cell_x = (i % STORYBOARD_COLS) as u32 * w;
        let cell_y = (i / STORYBOARD_COLS) as u32 * h;
        for y in 0..h {
            for x in 0..w {
                composite.put_pixel(cell_x + x, cell_y + y, *marked.get_pixel(x, y));
            }
        }
        draw_number(&mut composite, i + 1, cell_x + 2, cell_y + 2, [255, 255, 255]);
    }
    let spec = StoryboardSpec {
        keyframes: keyframes.to_vec(),
        rows: STORYBOARD_ROWS,
        cols: STORYBOARD_COLS,
        marks: marks.to_vec(),
    };
    Ok((composite, spec))
}

/// Deterministic synthetic video frame in pixel space (for storyboards and
/// fixtures; the backbone has its own embedding-space synthesis).
pub fn synthetic_frame(seed: u64, frame_index: usize, width: u32, height: u32) -> RgbImage {
    let base = mix64(seed ^ 0xf9a_3e11).wrapping_add(frame_index as u64);
    RgbImage::from_fn(width, height, |x, y| {
        let key = mix64(base ^ ((x as u64) << 24) ^ (y as u64));
        let v = |shift: u64| ((unit_value(key ^ shift) + 1.0) * 127.5) as u8;
        Rgb([v(1), v(2), v(3)])
    })
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("png encode: {e}")))?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyframes_match_uniform_formula() {
        assert_eq!(sample_keyframes(60, 6).unwrap(), vec![0, 11, 23, 35, 47, 59]);
        assert_eq!(sample_keyframes(6, 6).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert!(matches!(sample_keyframes(5, 6), Err(Error::Input(_))));
    }

    #[test]
    fn keyframes_always_include_endpoints() {
        for t in 6..200 {
            let idx = sample_keyframes(t, 6).unwrap();
            assert_eq!(idx[0], 0);
            assert_eq!(*idx.last().unwrap(), t - 1);
            assert!(idx.windows(2).all(|w| w[0] < w[1]), "strictly increasing at T={t}");
        }
    }

    #[test]
    fn full_frame_box_touches_all_edges() {
        let frame = RgbImage::from_pixel(32, 32, Rgb([10, 10, 10]));
        let marked = som_overlay(&frame, &PromptSpec::bbox(0.0, 0.0, 1.0, 1.0), [255, 0, 0]).unwrap();
        for i in 0..32 {
            assert_eq!(marked.get_pixel(i, 0).0, [255, 0, 0]);
            assert_eq!(marked.get_pixel(i, 31).0, [255, 0, 0]);
            assert_eq!(marked.get_pixel(0, i).0, [255, 0, 0]);
            assert_eq!(marked.get_pixel(31, i).0, [255, 0, 0]);
        }
    }

    #[test]
    fn box_overlay_leaves_outside_pixels_unchanged() {
        let frame = synthetic_frame(3, 0, 32, 32);
        let marked = som_overlay(&frame, &PromptSpec::bbox(0.25, 0.25, 0.75, 0.75), [0, 255, 0]).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside = (7..=24).contains(&x) && (7..=24).contains(&y);
                if !inside {
                    assert_eq!(marked.get_pixel(x, y), frame.get_pixel(x, y));
                }
            }
        }
        assert!(matches!(
            som_overlay(&frame, &PromptSpec::bbox(0.5, 0.2, 0.5, 0.8), [0, 255, 0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn mask_overlay_blends_at_half_alpha() {
        let frame = RgbImage::from_pixel(16, 16, Rgb([100, 50, 200]));
        let mut grid = vec![0u8; 16];
        grid[0] = 1; // top-left cell of a 4x4 grid
        let marked = som_overlay(&frame, &PromptSpec::mask(grid), [0, 0, 0]).unwrap();
        assert_eq!(marked.get_pixel(0, 0).0, [50, 25, 100]);
        assert_eq!(marked.get_pixel(15, 15).0, [100, 50, 200]);
    }

    #[test]
    fn composite_is_2x3_and_places_frames() {
        let frames: Vec<RgbImage> = (0..6).map(|i| synthetic_frame(7, i, 64, 64)).collect();
        let marks: Vec<Mark> = (0..6)
            .map(|_| Mark { region: PromptSpec::bbox(0.2, 0.2, 0.8, 0.8), color: [255, 0, 0] })
            .collect();
        let (composite, spec) = compose_storyboard(&frames, &marks, &[0, 2, 4, 6, 8, 10]).unwrap();
        assert_eq!(composite.dimensions(), (192, 128));
        assert_eq!((spec.rows, spec.cols), (2, 3));
        // Cell (0,0) equals marked frame 0 except where the index label drew.
        let marked0 = som_overlay(&frames[0], &marks[0].region, marks[0].color).unwrap();
        let mut diffs = 0;
        for y in 0..64 {
            for x in 0..64 {
                if composite.get_pixel(x, y) != marked0.get_pixel(x, y) {
                    diffs += 1;
                    assert!(x < 8 && y < 8, "difference outside label area at ({x},{y})");
                }
            }
        }
        assert!(diffs > 0 && diffs <= 15, "label should draw a handful of pixels");

        let five: Vec<RgbImage> = frames[..5].to_vec();
        assert!(matches!(
            compose_storyboard(&five, &marks[..5], &[0, 1, 2, 3, 4]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn png_round_trip() {
        let frame = synthetic_frame(9, 1, 24, 24);
        let bytes = encode_png(&frame).unwrap();
        let decoded = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(decoded, frame);
    }
}
