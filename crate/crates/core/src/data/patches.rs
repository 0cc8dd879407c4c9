use image::{Rgb, RgbImage};
use triplex_tensor::{Real, Tensor};

use super::DEFAULT_PATCH;
use crate::encoders::NEIGHBOR_GRID;

/// Side length of the neighbor view in pixels (5 patches).
pub const NEIGHBOR_VIEW: usize = NEIGHBOR_GRID * DEFAULT_PATCH;

/// Copies the `size x size` window whose top-left pixel is `(x0, y0)`,
/// filling everything outside the slide with zeros.
fn crop(slide: &RgbImage, x0: i64, y0: i64, size: usize) -> RgbImage {
    let (w, h) = (slide.width() as i64, slide.height() as i64);
    RgbImage::from_fn(size as u32, size as u32, |dx, dy| {
        let (x, y) = (x0 + dx as i64, y0 + dy as i64);
        if (0..w).contains(&x) && (0..h).contains(&y) {
            *slide.get_pixel(x as u32, y as u32)
        } else {
            Rgb([0, 0, 0])
        }
    })
}

/// The 224 x 224 patch covering columns `[cx - 112, cx + 112)` and rows
/// `[cy - 112, cy + 112)`.
pub fn extract_target_patch(slide: &RgbImage, cx: i64, cy: i64) -> RgbImage {
    let half = (DEFAULT_PATCH / 2) as i64;
    crop(slide, cx - half, cy - half, DEFAULT_PATCH)
}

/// The 1120 x 1120 window centred on the spot, cut row-major into 25
/// patches of 224 x 224. Patch 12 is the target patch.
pub fn extract_neighbor_view(slide: &RgbImage, cx: i64, cy: i64) -> Vec<RgbImage> {
    let half = (NEIGHBOR_VIEW / 2) as i64;
    let p = DEFAULT_PATCH as i64;
    let mut tiles = Vec::with_capacity(NEIGHBOR_GRID * NEIGHBOR_GRID);
    for r in 0..NEIGHBOR_GRID as i64 {
        for c in 0..NEIGHBOR_GRID as i64 {
            tiles.push(crop(
                slide,
                cx - half + c * p,
                cy - half + r * p,
                DEFAULT_PATCH,
            ));
        }
    }
    tiles
}

/// Planar `[3, H, W]` tensor with values scaled to `[0, 1]`.
pub fn image_to_tensor<T: Real>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = T::from_f64_lossy(1.0 / 255.0);
    Tensor::from_fn([3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        let (y, x) = (rest / w, rest % w);
        T::from_f64_lossy(img.get_pixel(x as u32, y as u32)[c] as f64) * scale
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([(x % 251) as u8, (y % 241) as u8, ((x + 3 * y) % 256) as u8])
        })
    }

    #[test]
    fn centered_crop_has_no_padding() {
        let img = gradient(448, 448);
        let p = extract_target_patch(&img, 224, 224);
        assert_eq!(p.dimensions(), (224, 224));
        for (x, y, px) in p.enumerate_pixels() {
            assert_eq!(*px, *img.get_pixel(x + 112, y + 112));
        }
    }

    #[test]
    fn corner_center_zeros_three_quadrants() {
        let img = RgbImage::from_pixel(300, 300, Rgb([9, 9, 9]));
        let p = extract_target_patch(&img, 0, 0);
        for (x, y, px) in p.enumerate_pixels() {
            let inside = x >= 112 && y >= 112;
            assert_eq!(px[0] == 9, inside, "pixel ({x}, {y})");
        }
    }

    #[test]
    fn crop_matches_direct_indexing() {
        let img = gradient(500, 400);
        let (cx, cy) = (137i64, 301i64);
        let p = extract_target_patch(&img, cx, cy);
        for (x, y, px) in p.enumerate_pixels() {
            let (sx, sy) = (cx - 112 + x as i64, cy - 112 + y as i64);
            let want = if (0..500).contains(&sx) && (0..400).contains(&sy) {
                *img.get_pixel(sx as u32, sy as u32)
            } else {
                Rgb([0, 0, 0])
            };
            assert_eq!(*px, want);
        }
    }

    #[test]
    fn neighbor_tiles_are_placed_row_major() {
        let img = gradient(1400, 1300);
        let (cx, cy) = (700i64, 650i64);
        let tiles = extract_neighbor_view(&img, cx, cy);
        assert_eq!(tiles.len(), 25);
        assert_eq!(
            *tiles[0].get_pixel(0, 0),
            *img.get_pixel((cx - 560) as u32, (cy - 560) as u32)
        );
        // Tile (row 1, column 3) starts 224 px down and 672 px right.
        assert_eq!(
            *tiles[8].get_pixel(5, 7),
            *img.get_pixel((cx - 560 + 672 + 5) as u32, (cy - 560 + 224 + 7) as u32)
        );
        assert_eq!(tiles[12], extract_target_patch(&img, cx, cy));
    }

    #[test]
    fn corner_spot_has_mostly_empty_tiles() {
        let img = RgbImage::from_pixel(1200, 1200, Rgb([200, 100, 50]));
        let tiles = extract_neighbor_view(&img, 0, 0);
        let empty = tiles
            .iter()
            .filter(|t| t.pixels().all(|p| p.0 == [0, 0, 0]))
            .count();
        // Two tile rows and two tile columns lie entirely left of / above the
        // slide: 25 - 3 * 3 tiles.
        assert_eq!(empty, 16);
        assert!(empty >= 15);
    }

    #[test]
    fn shifting_slide_and_centre_keeps_patches() {
        let img = gradient(600, 600);
        let (dx, dy) = (40u32, 25u32);
        let mut shifted = RgbImage::new(600 + dx, 600 + dy);
        for (x, y, px) in img.enumerate_pixels() {
            shifted.put_pixel(x + dx, y + dy, *px);
        }
        let a = extract_neighbor_view(&img, 300, 280);
        let b = extract_neighbor_view(&shifted, 300 + dx as i64, 280 + dy as i64);
        assert_eq!(a, b);
    }

    #[test]
    fn tensor_layout_is_planar() {
        let img = gradient(4, 3);
        let t: Tensor<f64> = image_to_tensor(&img);
        assert_eq!(t.shape(), &[3, 3, 4]);
        assert_eq!(t.get(&[2, 1, 3]), img.get_pixel(3, 1)[2] as f64 / 255.0);
    }
}
