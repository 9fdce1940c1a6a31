//! Image loading, luma conversion and the patch grid that every score is indexed by.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PATCH_SIZE: u32 = 16;
pub const DEFAULT_CROP_MARGIN: u32 = 8;

/// An 8-bit sRGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} RGB image needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn bounds(&self) -> PixelBox {
        PixelBox::new(0, 0, self.width, self.height)
    }

    /// Encodes the buffer as a PNG byte stream.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let rgb = image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .ok_or_else(|| Error::Encode("buffer size does not match dimensions".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        rgb.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn from_encoded(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
        let rgb = decoded.into_rgb8();
        let (width, height) = rgb.dimensions();
        Ok(Self {
            width,
            height,
            data: rgb.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

/// Axis-aligned pixel rectangle, half-open on the right and bottom edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn contains_box(&self, other: &PixelBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersects(&self, other: &PixelBox) -> bool {
        self.x < other.right()
            && other.x < self.right()
            && self.y < other.bottom()
            && other.y < self.bottom()
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }
}

/// 1-based grid coordinate of a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchCoord {
    pub r: usize,
    pub c: usize,
}

impl PatchCoord {
    pub const fn new(r: usize, c: usize) -> Self {
        Self { r, c }
    }

    /// Euclidean distance in grid units.
    pub fn distance(&self, other: &PatchCoord) -> f64 {
        let dr = self.r as f64 - other.r as f64;
        let dc = self.c as f64 - other.c as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

/// Dense row-major map over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMap<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T> PatchMap<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} map needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(PatchCoord) -> T) -> Self {
        let data = (0..rows * cols)
            .map(|i| f(PatchCoord::new(i / cols + 1, i % cols + 1)))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index_of(&self, coord: PatchCoord) -> usize {
        debug_assert!(coord.r >= 1 && coord.r <= self.rows && coord.c >= 1 && coord.c <= self.cols);
        (coord.r - 1) * self.cols + (coord.c - 1)
    }

    pub fn coord_of(&self, index: usize) -> PatchCoord {
        PatchCoord::new(index / self.cols + 1, index % self.cols + 1)
    }

    pub fn get(&self, coord: PatchCoord) -> &T {
        &self.data[self.index_of(coord)]
    }

    pub fn get_mut(&mut self, coord: PatchCoord) -> &mut T {
        let i = self.index_of(coord);
        &mut self.data[i]
    }

    /// Iterates `(coord, value)` pairs in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (PatchCoord, &T)> + '_ {
        let cols = self.cols;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (PatchCoord::new(i / cols + 1, i % cols + 1), v))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> PatchMap<U> {
        PatchMap {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Grayscale working plane with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LumaPlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LumaPlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} plane needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// One P×P luma patch together with where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub coord: PatchCoord,
    pub source: PixelBox,
    /// Row-major P×P samples.
    pub pixels: Vec<f64>,
}

/// The image cut into non-overlapping P×P patches anchored at the top-left corner.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    patch_size: usize,
    patches: PatchMap<Patch>,
}

impl PatchGrid {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        self.patches.rows()
    }

    pub fn cols(&self) -> usize {
        self.patches.cols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.patches.dims()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch(&self, coord: PatchCoord) -> &Patch {
        self.patches.get(coord)
    }

    pub fn patches(&self) -> &PatchMap<Patch> {
        &self.patches
    }

    pub fn iter(&self) -> impl Iterator<Item = &Patch> + '_ {
        self.patches.as_slice().iter()
    }

    /// Pixel box of the patch at `coord`.
    pub fn box_of(&self, coord: PatchCoord) -> PixelBox {
        patch_box(coord, self.patch_size as u32)
    }
}

pub fn patch_box(coord: PatchCoord, patch_size: u32) -> PixelBox {
    PixelBox::new(
        (coord.c as u32 - 1) * patch_size,
        (coord.r as u32 - 1) * patch_size,
        patch_size,
        patch_size,
    )
}

/// Decodes a PNG or JPEG file into an RGB buffer, dropping any alpha channel.
pub fn load_image(path: &Path, patch_size: u32) -> Result<ImageBuffer> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let format = image::guess_format(&bytes).map_err(|e| Error::Decode(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(Error::Decode(format!("unsupported format {format:?}")));
    }
    let img = ImageBuffer::from_encoded(&bytes)?;
    ensure_fits(img.width, img.height, patch_size)?;
    Ok(img)
}

fn ensure_fits(width: u32, height: u32, patch_size: u32) -> Result<()> {
    if width < patch_size || height < patch_size {
        return Err(Error::ImageTooSmall {
            width,
            height,
            patch_size,
        });
    }
    Ok(())
}

/// BT.601 luma scaled to `[0, 1]`.
pub fn luma(rgb: [u8; 3]) -> f64 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64) / 255.0
}

pub fn to_luma(img: &ImageBuffer) -> LumaPlane {
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| luma([px[0], px[1], px[2]]).clamp(0.0, 1.0))
        .collect();
    LumaPlane {
        width: img.width as usize,
        height: img.height as usize,
        data,
    }
}

/// Tiles the plane into `floor(h/P) x floor(w/P)` patches; trailing pixels are dropped.
pub fn decompose(plane: &LumaPlane, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(Error::DimensionMismatch("patch size must be positive".into()));
    }
    ensure_fits(plane.width as u32, plane.height as u32, patch_size as u32)?;
    let rows = plane.height / patch_size;
    let cols = plane.width / patch_size;
    let patches = PatchMap::from_fn(rows, cols, |coord| {
        let source = patch_box(coord, patch_size as u32);
        let mut pixels = Vec::with_capacity(patch_size * patch_size);
        for y in source.y as usize..source.bottom() as usize {
            let row = y * plane.width;
            pixels.extend_from_slice(&plane.data[row + source.x as usize..row + source.right() as usize]);
        }
        Patch {
            coord,
            source,
            pixels,
        }
    });
    Ok(PatchGrid {
        patch_size,
        patches,
    })
}

/// Crops `bx` grown by `margin` on every side, clamped to the image.
pub fn crop_with_margin(img: &ImageBuffer, bx: PixelBox, margin: u32) -> Result<ImageBuffer> {
    if bx.is_empty() || !img.bounds().contains_box(&bx) {
        return Err(Error::BoxOutOfBounds(bx));
    }
    let x0 = bx.x.saturating_sub(margin);
    let y0 = bx.y.saturating_sub(margin);
    let x1 = (bx.right() + margin).min(img.width);
    let y1 = (bx.bottom() + margin).min(img.height);
    let (w, h) = (x1 - x0, y1 - y0);
    let mut data = Vec::with_capacity(w as usize * h as usize * 3);
    for y in y0..y1 {
        let start = img.offset(x0, y);
        data.extend_from_slice(&img.data[start..start + w as usize * 3]);
    }
    Ok(ImageBuffer {
        width: w,
        height: h,
        data,
    })
}
