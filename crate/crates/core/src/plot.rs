//! Dependency-free grouped bar chart for the comparison report, rendered
//! straight into an RGB PNG with a built-in 5x7 pixel font.

use crate::error::Result;
use crate::eval::{MetricsReport, REPORT_MODES};
use crate::img::save_rgb_png;
use ndarray::Array3;
use std::collections::BTreeMap;
use std::path::Path;

const WHITE: [u8; 3] = [255, 255, 255];
const BLACK: [u8; 3] = [20, 20, 20];
const GRID: [u8; 3] = [210, 210, 210];
const MODE_COLORS: [[u8; 3]; 3] = [
    [160, 160, 160], // baseline_ce
    [120, 160, 220], // baseline_ce_supcon
    [200, 90, 90],   // full
];

/// 5x7 glyphs, one bit row per byte (bit 4 = leftmost column).
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x0A, 0x04, 0x04, 0x04, 0x0A, 0x11],
        'Y' => [0x11, 0x0A, 0x04, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1E, 0x01, 0x01, 0x0E, 0x01, 0x01, 0x1E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        _ => [0; 7],
    }
}

fn draw_text(canvas: &mut Array3<u8>, x: usize, y: usize, text: &str, color: [u8; 3]) {
    let (h, w, _) = canvas.dim();
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch);
        for (ry, row) in g.iter().enumerate() {
            for rx in 0..5 {
                if row >> (4 - rx) & 1 == 1 {
                    let (py, px) = (y + ry, cx + rx);
                    if py < h && px < w {
                        for c in 0..3 {
                            canvas[[py, px, c]] = color[c];
                        }
                    }
                }
            }
        }
        cx += 6;
    }
}

fn fill_rect(canvas: &mut Array3<u8>, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
    let (h, w, _) = canvas.dim();
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            for c in 0..3 {
                canvas[[y, x, c]] = color[c];
            }
        }
    }
}

/// Grouped bar chart of the comparison table: one group per metric, one bar
/// per mode, y axis fixed to [0, 1].
pub fn render_comparison_plot(runs: &BTreeMap<String, MetricsReport>, path: &Path) -> Result<()> {
    let (height, width) = (420usize, 860usize);
    let mut canvas = Array3::<u8>::from_elem((height, width, 3), 255);
    fill_rect(&mut canvas, 0, 0, width, height, WHITE);

    let plot_left = 60;
    let plot_right = width - 20;
    let plot_top = 30;
    let plot_bottom = height - 60;
    let plot_h = plot_bottom - plot_top;

    for i in 0..=4 {
        let v = i as f64 * 0.25;
        let y = plot_bottom - (v * plot_h as f64) as usize;
        fill_rect(&mut canvas, plot_left, y, plot_right, y + 1, GRID);
        draw_text(&mut canvas, 14, y.saturating_sub(3), &format!("{v:.2}"), BLACK);
    }

    let metrics: [(&str, fn(&MetricsReport) -> f64); 4] = [
        ("PRECISION", |r| r.precision),
        ("RECALL", |r| r.recall),
        ("F1", |r| r.f1),
        ("MACRO-F1", |r| r.macro_f1),
    ];
    let present: Vec<&str> = REPORT_MODES
        .iter()
        .copied()
        .filter(|m| runs.contains_key(*m))
        .collect();
    let group_w = (plot_right - plot_left) / metrics.len();
    let bar_w = (group_w - 30) / present.len().max(1);

    for (gi, (name, get)) in metrics.iter().enumerate() {
        let gx = plot_left + gi * group_w;
        draw_text(&mut canvas, gx + group_w / 2 - name.len() * 3, plot_bottom + 8, name, BLACK);
        for (mi, mode) in present.iter().enumerate() {
            let r = &runs[*mode];
            let v = get(r).clamp(0.0, 1.0);
            let bar_h = (v * plot_h as f64) as usize;
            let x0 = gx + 15 + mi * bar_w;
            let color = MODE_COLORS[REPORT_MODES.iter().position(|m| m == mode).unwrap()];
            fill_rect(&mut canvas, x0, plot_bottom - bar_h, x0 + bar_w - 4, plot_bottom, color);
            draw_text(
                &mut canvas,
                x0,
                plot_bottom.saturating_sub(bar_h + 10),
                &format!("{v:.2}"),
                BLACK,
            );
        }
    }

    let mut lx = plot_left;
    let ly = height - 30;
    for mode in &present {
        let color = MODE_COLORS[REPORT_MODES.iter().position(|m| m == mode).unwrap()];
        fill_rect(&mut canvas, lx, ly, lx + 12, ly + 12, color);
        draw_text(&mut canvas, lx + 16, ly + 2, mode, BLACK);
        lx += 16 + mode.len() * 6 + 30;
    }

    fill_rect(&mut canvas, plot_left - 1, plot_top, plot_left, plot_bottom + 1, BLACK);
    fill_rect(&mut canvas, plot_left - 1, plot_bottom, plot_right, plot_bottom + 1, BLACK);

    save_rgb_png(path, &canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ConfusionCounts;

    #[test]
    fn renders_a_png_file() {
        let mk = |p: f64| MetricsReport {
            precision: p,
            recall: p * 0.9,
            f1: p * 0.95,
            f1_tumor: p * 0.95,
            f1_non_tumor: p,
            macro_f1: p * 0.97,
            counts: ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 1 },
            zero_division_flags: vec![],
            pixel_accuracy: None,
        };
        let mut runs = BTreeMap::new();
        runs.insert("baseline_ce".to_string(), mk(0.6));
        runs.insert("full".to_string(), mk(0.8));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cmp.png");
        render_comparison_plot(&runs, &path).unwrap();
        let img = crate::img::load_rgb_png(&path).unwrap();
        assert_eq!(img.dim(), (420, 860, 3));
    }
}
