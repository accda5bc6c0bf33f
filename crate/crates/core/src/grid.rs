//! Composite image grids for eyeballing translations side by side.
//!
//! Rows are randomly chosen sample ids, columns are datasets. A header strip
//! names each column and a left strip names each row, drawn with a built-in
//! 3x5 pixel font so the output depends on nothing but the inputs.

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Domain};
use crate::error::{Error, Result};

const SCALE: u32 = 2;
const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;
const PAD: u32 = 4;
const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);
const INK: Rgb<u8> = Rgb([235, 235, 235]);

/// One grid column: a dataset, the domain to show and its label.
pub struct GridColumn<'a> {
    pub label: String,
    pub dataset: &'a Dataset,
    pub domain: Domain,
}

/// Source images when the dataset has them, otherwise target images.
pub fn default_domain(d: &Dataset) -> Domain {
    if d.has_domain(Domain::Source) {
        Domain::Source
    } else {
        Domain::Target
    }
}

/// Ids present in every column, in the first column's order. Errors list the
/// ids some column lacks.
pub fn common_ids(columns: &[GridColumn]) -> Result<Vec<String>> {
    let first = columns.first().ok_or_else(|| Error::Input("grid needs at least one dataset".into()))?;
    let mut missing = Vec::new();
    for c in &columns[1..] {
        for id in first.dataset.ids() {
            if !c.dataset.ids().any(|x| x == id) {
                missing.push(format!("{} lacks {id}", c.label));
            }
        }
        for id in c.dataset.ids() {
            if !first.dataset.ids().any(|x| x == id) {
                missing.push(format!("{} lacks {id}", first.label));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Input(format!("sample ids differ across datasets: {}", missing.join(", "))));
    }
    Ok(first.dataset.ids().map(str::to_string).collect())
}

/// Draw `rows` distinct ids with `seed` and compose the grid.
pub fn render_grid(columns: &[GridColumn], rows: usize, seed: u64) -> Result<RgbImage> {
    let ids = common_ids(columns)?;
    if rows == 0 || rows > ids.len() {
        return Err(Error::Input(format!("asked for {rows} rows, datasets share {} samples", ids.len())));
    }
    let [h, w] = columns[0].dataset.manifest().image_size;
    if columns.iter().any(|c| c.dataset.manifest().image_size != [h, w]) {
        return Err(Error::Input("datasets differ in image size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<&String> = ids.choose_multiple(&mut rng, rows).collect();
    picked.sort();

    let (w, h) = (w as u32, h as u32);
    let label_h = GLYPH_H * SCALE + 2 * PAD;
    let max_row_label = picked.iter().map(|s| s.len()).max().unwrap_or(0) as u32;
    let label_w = text_width(max_row_label) + 2 * PAD;
    let col_w = w.max(text_width(columns.iter().map(|c| c.label.len()).max().unwrap_or(0) as u32) + PAD);
    let width = label_w + columns.len() as u32 * (col_w + PAD);
    let height = label_h + rows as u32 * (h + PAD);
    let mut out = RgbImage::from_pixel(width, height, BACKGROUND);

    for (ci, c) in columns.iter().enumerate() {
        let x0 = label_w + ci as u32 * (col_w + PAD);
        draw_text(&mut out, x0, PAD, &c.label);
        for (ri, id) in picked.iter().enumerate() {
            let img = c.dataset.read_image(c.domain, id)?;
            let y0 = label_h + ri as u32 * (h + PAD);
            for (x, y, p) in img.enumerate_pixels() {
                out.put_pixel(x0 + x, y0 + y, *p);
            }
        }
    }
    for (ri, id) in picked.iter().enumerate() {
        let y0 = label_h + ri as u32 * (h + PAD) + (h.saturating_sub(GLYPH_H * SCALE)) / 2;
        draw_text(&mut out, PAD, y0, id);
    }
    Ok(out)
}

/// Write `img` as an 8-bit RGB PNG.
pub fn save_png(img: &RgbImage, path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::format(path, e))
}

fn text_width(chars: u32) -> u32 {
    chars * (GLYPH_W + 1) * SCALE
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str) {
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        let gx = x0 + i as u32 * (GLYPH_W + 1) * SCALE;
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - c) & 1 == 0 {
                    continue;
                }
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let (x, y) = (gx + c * SCALE + dx, y0 + r as u32 * SCALE + dy);
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, INK);
                        }
                    }
                }
            }
        }
    }
}

/// Five 3-bit rows per character; unknown characters draw as a box.
fn glyph(ch: char) -> [u8; 5] {
    match ch.to_ascii_lowercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 3, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        '.' => [0, 0, 0, 0, 2],
        ':' => [0, 2, 0, 2, 0],
        '/' => [1, 1, 2, 4, 4],
        '+' => [0, 2, 7, 2, 0],
        ' ' => [0, 0, 0, 0, 0],
        _ => [7, 5, 5, 5, 7],
    }
}
