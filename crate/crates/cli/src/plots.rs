//! PNG rendering of ROC curves, loss curves and mask grids.
//!
//! Plots are derived from run artifacts only and never read back.

use std::path::Path;

use font8x8::UnicodeFonts;
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use ndarray::{Array2, Array3};

use fasw_core::{Error, Result};

const WIDTH: u32 = 520;
const HEIGHT: u32 = 380;
const LEFT: u32 = 64;
const RIGHT: u32 = 16;
const TOP: u32 = 28;
const BOTTOM: u32 = 44;
const TICKS: usize = 5;
const CELL: u32 = 96;
const GAP: u32 = 4;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([23, 190, 207]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed ranges; computed from the data when `None`.
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
}

/// `[min, max]` of the finite values, widened when degenerate.
pub fn axis_range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.02 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

impl LinePlot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            x_range: None,
            y_range: None,
        }
    }

    /// ROC axes: FPR and TPR on `[0, 1]`.
    pub fn roc(title: &str) -> Self {
        Self {
            x_range: Some((0.0, 1.0)),
            y_range: Some((0.0, 1.0)),
            ..Self::new(title, "FPR", "TPR")
        }
    }

    pub fn ranges(&self) -> ((f64, f64), (f64, f64)) {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let x = self.x_range.unwrap_or_else(|| axis_range(pts().map(|p| p.0)));
        let y = self.y_range.unwrap_or_else(|| axis_range(pts().map(|p| p.1)));
        (x, y)
    }

    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, WHITE);
        let ((x0, x1), (y0, y1)) = self.ranges();
        let (pw, ph) = ((WIDTH - LEFT - RIGHT) as f64, (HEIGHT - TOP - BOTTOM) as f64);
        let to_px = |x: f64, y: f64| {
            (
                (LEFT as f64 + (x - x0) / (x1 - x0) * pw) as f32,
                (TOP as f64 + (1.0 - (y - y0) / (y1 - y0)) * ph) as f32,
            )
        };

        for i in 0..TICKS {
            let t = i as f64 / (TICKS - 1) as f64;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let (px, _) = to_px(xv, y0);
            let (_, py) = to_px(x0, yv);
            draw_line_segment_mut(&mut img, (px, TOP as f32), (px, (HEIGHT - BOTTOM) as f32), GRID);
            draw_line_segment_mut(&mut img, (LEFT as f32, py), ((WIDTH - RIGHT) as f32, py), GRID);
            let xl = tick_label(xv);
            draw_text(&mut img, px as i32 - 4 * xl.len() as i32, (HEIGHT - BOTTOM + 6) as i32, &xl, BLACK);
            let yl = tick_label(yv);
            draw_text(&mut img, LEFT as i32 - 6 - 8 * yl.len() as i32, py as i32 - 4, &yl, BLACK);
        }
        draw_hollow_rect_mut(
            &mut img,
            Rect::at(LEFT as i32, TOP as i32).of_size(WIDTH - LEFT - RIGHT + 1, HEIGHT - TOP - BOTTOM + 1),
            BLACK,
        );

        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let finite: Vec<(f64, f64)> = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
            for w in finite.windows(2) {
                draw_line_segment_mut(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), color);
            }
            if finite.len() == 1 {
                let (px, py) = to_px(finite[0].0, finite[0].1);
                draw_filled_rect_mut(&mut img, Rect::at(px as i32 - 1, py as i32 - 1).of_size(3, 3), color);
            }
            let ly = TOP as i32 + 6 + 12 * k as i32;
            let lx = (WIDTH - RIGHT) as i32 - 8 - 8 * s.label.len().min(40) as i32 - 16;
            draw_filled_rect_mut(&mut img, Rect::at(lx, ly + 2).of_size(10, 4), color);
            draw_text(&mut img, lx + 14, ly, &s.label, BLACK);
        }

        draw_text(&mut img, LEFT as i32, 8, &self.title, BLACK);
        let xl = &self.x_label;
        draw_text(&mut img, (LEFT + (WIDTH - LEFT - RIGHT) / 2) as i32 - 4 * xl.len() as i32, (HEIGHT - 16) as i32, xl, BLACK);
        draw_text(&mut img, 4, 8, &self.y_label, BLACK);
        img
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// 8×8 bitmap text; characters outside the font are skipped.
pub fn draw_text(img: &mut RgbImage, x: i32, y: i32, text: &str, color: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else {
            continue;
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) != 0 {
                    let (px, py) = (x + 8 * i as i32 + col, y + row as i32);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
}

/// One tile of a mask grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Tile {
    /// `[3, H, W]` in `[0, 1]`.
    Rgb(Array3<f64>),
    /// Soft map in `[0, 1]`, drawn in grey.
    Gray(Array2<f64>),
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn paint_tile(img: &mut RgbImage, tile: &Tile, ox: u32, oy: u32) {
    let (h, w) = match tile {
        Tile::Rgb(a) => (a.dim().1, a.dim().2),
        Tile::Gray(a) => a.dim(),
    };
    for y in 0..CELL {
        for x in 0..CELL {
            let (sy, sx) = ((y as usize * h) / CELL as usize, (x as usize * w) / CELL as usize);
            let px = match tile {
                Tile::Rgb(a) => Rgb([to_u8(a[[0, sy, sx]]), to_u8(a[[1, sy, sx]]), to_u8(a[[2, sy, sx]])]),
                Tile::Gray(a) => {
                    let g = to_u8(a[[sy, sx]]);
                    Rgb([g, g, g])
                }
            };
            img.put_pixel(ox + x, oy + y, px);
        }
    }
}

/// Rows are samples; each row must have one tile per column header.
pub fn mask_grid(columns: &[String], rows: &[Vec<Tile>]) -> Result<RgbImage> {
    if rows.is_empty() || columns.is_empty() {
        return Err(Error::Input("mask grid needs at least one row and one column".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != columns.len()) {
        return Err(Error::Input(format!(
            "mask grid row has {} tiles for {} columns",
            r.len(),
            columns.len()
        )));
    }
    let header = 16;
    let width = GAP + columns.len() as u32 * (CELL + GAP);
    let height = header + GAP + rows.len() as u32 * (CELL + GAP);
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    for (c, name) in columns.iter().enumerate() {
        let max_chars = (CELL / 8) as usize;
        let label: String = name.chars().take(max_chars).collect();
        draw_text(&mut img, (GAP + c as u32 * (CELL + GAP)) as i32, 4, &label, BLACK);
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            paint_tile(&mut img, tile, GAP + c as u32 * (CELL + GAP), header + GAP + r as u32 * (CELL + GAP));
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Header and numeric rows of a CSV artifact; unparsable cells become NaN.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Input(format!("`{}` is empty", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.trim().parse::<f64>().unwrap_or(f64::NAN)).collect())
        .collect();
    Ok((header, rows))
}

/// `(fpr, tpr)` pairs from a ROC CSV.
pub fn roc_series(label: &str, path: &Path) -> Result<Series> {
    let (header, rows) = read_numeric_csv(path)?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("`{}` has no `{name}` column", path.display())))
    };
    let (f, t) = (col("fpr")?, col("tpr")?);
    Ok(Series {
        label: label.into(),
        points: rows.iter().map(|r| (r[f], r[t])).collect(),
    })
}

/// One series per loss column of a loss-log CSV, against epoch.
pub fn loss_series(path: &Path) -> Result<Vec<Series>> {
    let (header, rows) = read_numeric_csv(path)?;
    let epoch = header
        .iter()
        .position(|h| h == "epoch")
        .ok_or_else(|| Error::Input(format!("`{}` has no `epoch` column", path.display())))?;
    Ok(header
        .iter()
        .enumerate()
        .filter(|(i, h)| *i != epoch && h.as_str() != "lr")
        .map(|(i, h)| Series {
            label: h.clone(),
            points: rows.iter().map(|r| (r[epoch], r[i])).collect(),
        })
        .collect())
}
