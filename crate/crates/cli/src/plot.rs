//! Static plot rendering for the report command: SSIM-vs-layer lines and
//! an mIoU-vs-mode bar chart, written as PNG images with a plain-text
//! legend alongside.

use std::path::Path;

use image::{Rgb, RgbImage};

use xmd_core::report::ReportRow;

const W: u32 = 640;
const H: u32 = 420;
const MARGIN: u32 = 48;

const COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

// 4x6 glyphs for axis tick labels (digits, dot, minus).
const GLYPHS: [(char, [u8; 6]); 12] = [
    ('0', [0b0110, 0b1001, 0b1001, 0b1001, 0b1001, 0b0110]),
    ('1', [0b0010, 0b0110, 0b0010, 0b0010, 0b0010, 0b0111]),
    ('2', [0b0110, 0b1001, 0b0001, 0b0110, 0b1000, 0b1111]),
    ('3', [0b0110, 0b1001, 0b0010, 0b0001, 0b1001, 0b0110]),
    ('4', [0b0010, 0b0110, 0b1010, 0b1111, 0b0010, 0b0010]),
    ('5', [0b1111, 0b1000, 0b1110, 0b0001, 0b1001, 0b0110]),
    ('6', [0b0110, 0b1000, 0b1110, 0b1001, 0b1001, 0b0110]),
    ('7', [0b1111, 0b0001, 0b0010, 0b0010, 0b0100, 0b0100]),
    ('8', [0b0110, 0b1001, 0b0110, 0b1001, 0b1001, 0b0110]),
    ('9', [0b0110, 0b1001, 0b1001, 0b0111, 0b0001, 0b0110]),
    ('.', [0b0000, 0b0000, 0b0000, 0b0000, 0b0000, 0b0010]),
    ('-', [0b0000, 0b0000, 0b1111, 0b0000, 0b0000, 0b0000]),
];

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some((_, glyph)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
            for (ry, row) in glyph.iter().enumerate() {
                for rx in 0..4 {
                    if row & (1 << (3 - rx)) != 0 {
                        let (px, py) = (cx + rx, y + ry as u32);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, Rgb([40, 40, 40]));
                        }
                    }
                }
            }
        }
        cx += 5;
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as u32).max(1);
    for s in 0..=steps {
        let t = f64::from(s) / f64::from(steps);
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

fn blank() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    // Axes.
    draw_line(
        &mut img,
        f64::from(MARGIN),
        f64::from(H - MARGIN),
        f64::from(W - MARGIN / 2),
        f64::from(H - MARGIN),
        [0, 0, 0],
    );
    draw_line(
        &mut img,
        f64::from(MARGIN),
        f64::from(H - MARGIN),
        f64::from(MARGIN),
        f64::from(MARGIN / 2),
        [0, 0, 0],
    );
    img
}

fn y_ticks(img: &mut RgbImage, lo: f64, hi: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * f64::from(i) / 4.0;
        let y = f64::from(H - MARGIN) - f64::from(H - MARGIN - MARGIN / 2) * f64::from(i) / 4.0;
        draw_line(img, f64::from(MARGIN) - 3.0, y, f64::from(MARGIN), y, [0, 0, 0]);
        draw_text(img, 6, y as u32 - 3, &format!("{v:.2}"));
    }
}

/// Render both plots plus the legend mapping colors to modes.
pub fn write_plots(rows: &[ReportRow], out: &Path) -> anyhow::Result<()> {
    let taps = ["stem", "stage1", "stage2", "stage3"];
    let mut modes: Vec<String> = rows.iter().map(|r| r.mode.clone()).collect();
    modes.sort();
    modes.dedup();

    // SSIM vs layer: one polyline per mode over the tap sequence.
    let mut any_ssim = false;
    {
        let series: Vec<(usize, Vec<Option<f64>>)> = modes
            .iter()
            .enumerate()
            .map(|(mi, mode)| {
                let values = taps
                    .iter()
                    .map(|tap| {
                        rows.iter()
                            .find(|r| {
                                r.mode == *mode && r.metric == format!("depth_ssim_{tap}")
                            })
                            .map(|r| r.mean)
                    })
                    .collect();
                (mi, values)
            })
            .collect();
        let flat: Vec<f64> = series
            .iter()
            .flat_map(|(_, v)| v.iter().flatten().copied().collect::<Vec<_>>())
            .collect();
        if !flat.is_empty() {
            any_ssim = true;
            let lo = flat.iter().copied().fold(f64::INFINITY, f64::min) - 0.05;
            let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.05;
            let mut img = blank();
            y_ticks(&mut img, lo, hi);
            let xw = f64::from(W - MARGIN - MARGIN / 2) / (taps.len() - 1) as f64;
            for (mi, values) in &series {
                let color = COLORS[mi % COLORS.len()];
                let mut prev: Option<(f64, f64)> = None;
                for (ti, v) in values.iter().enumerate() {
                    if let Some(v) = v {
                        let x = f64::from(MARGIN) + xw * ti as f64;
                        let y = f64::from(H - MARGIN)
                            - (v - lo) / (hi - lo) * f64::from(H - MARGIN - MARGIN / 2);
                        if let Some((px, py)) = prev {
                            draw_line(&mut img, px, py, x, y, color);
                        }
                        for dy in -2i64..=2 {
                            for dx in -2i64..=2 {
                                let (qx, qy) = ((x as i64 + dx) as u32, (y as i64 + dy) as u32);
                                if qx < W && qy < H {
                                    img.put_pixel(qx, qy, Rgb(color));
                                }
                            }
                        }
                        prev = Some((x, y));
                    }
                }
            }
            for (ti, _) in taps.iter().enumerate() {
                let x = f64::from(MARGIN) + xw * ti as f64;
                draw_text(&mut img, x as u32 - 2, H - MARGIN + 6, &format!("{ti}"));
            }
            img.save(out.join("ssim_vs_layer.png"))?;
        }
    }

    // mIoU vs mode bar chart.
    let miou_rows: Vec<&ReportRow> = modes
        .iter()
        .filter_map(|mode| {
            rows.iter()
                .find(|r| r.mode == *mode && r.metric == "best_val_miou")
        })
        .collect();
    if !miou_rows.is_empty() {
        let hi = miou_rows.iter().map(|r| r.mean).fold(0.0, f64::max) * 1.15;
        let mut img = blank();
        y_ticks(&mut img, 0.0, hi);
        let bw = f64::from(W - MARGIN - MARGIN / 2) / miou_rows.len() as f64;
        for (i, row) in miou_rows.iter().enumerate() {
            let color = COLORS
                [modes.iter().position(|m| *m == row.mode).unwrap_or(0) % COLORS.len()];
            let x0 = f64::from(MARGIN) + bw * i as f64 + bw * 0.2;
            let x1 = f64::from(MARGIN) + bw * (i as f64 + 0.8);
            let y = f64::from(H - MARGIN)
                - row.mean / hi * f64::from(H - MARGIN - MARGIN / 2);
            for x in (x0 as u32)..(x1 as u32) {
                draw_line(&mut img, f64::from(x), f64::from(H - MARGIN), f64::from(x), y, color);
            }
            if let Some(sd) = row.stddev {
                let yt = f64::from(H - MARGIN)
                    - (row.mean + sd) / hi * f64::from(H - MARGIN - MARGIN / 2);
                let yb = f64::from(H - MARGIN)
                    - (row.mean - sd) / hi * f64::from(H - MARGIN - MARGIN / 2);
                let xc = (x0 + x1) / 2.0;
                draw_line(&mut img, xc, yt, xc, yb, [0, 0, 0]);
            }
            draw_text(&mut img, x0 as u32, H - MARGIN + 6, &format!("{i}"));
        }
        img.save(out.join("miou_vs_mode.png"))?;
    }

    // Legend: index-to-series mapping for both plots.
    let mut legend = String::from("miou_vs_mode.png bars / ssim_vs_layer.png lines, by color:\n");
    for (mi, mode) in modes.iter().enumerate() {
        let c = COLORS[mi % COLORS.len()];
        legend.push_str(&format!("  {mi}: {mode} (rgb {},{},{})\n", c[0], c[1], c[2]));
    }
    if any_ssim {
        legend.push_str("ssim_vs_layer x-axis taps: 0=stem 1=stage1 2=stage2 3=stage3\n");
    }
    std::fs::write(out.join("plot_legend.txt"), legend)?;
    Ok(())
}
