//! Deterministic output emission: record CSVs, SVG line charts, and PNG
//! sample grids.

use std::path::Path;

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::harness::records::ExperimentRecord;

/// Writes `(phase, key, step, value)` rows. Zero records produce a
/// header-only file. Values carry nine significant digits.
pub fn emit_csv(records: &[ExperimentRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{e}")))?;
    w.write_record(["phase", "key", "step", "value"])
        .map_err(|e| Error::data(format!("{e}")))?;
    for r in records {
        let phase = serde_json::to_value(r.phase)?
            .as_str()
            .unwrap_or("unknown")
            .to_string();
        w.write_record([
            phase,
            r.key.clone(),
            r.step.to_string(),
            format!("{:.9e}", r.value),
        ])
        .map_err(|e| Error::data(format!("{e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses rows written by [`emit_csv`].
pub fn parse_csv(path: impl AsRef<Path>) -> Result<Vec<(String, String, u64, f64)>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(|e| Error::data(format!("{e}")))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::data(format!("{e}")))?;
        if rec.len() != 4 {
            return Err(Error::data(format!("csv row has {} fields", rec.len())));
        }
        out.push((
            rec[0].to_string(),
            rec[1].to_string(),
            rec[2].parse().map_err(|e| Error::data(format!("step: {e}")))?,
            rec[3].parse().map_err(|e| Error::data(format!("value: {e}")))?,
        ));
    }
    Ok(out)
}

const PALETTE: [&str; 8] = [
    "#1b6ca8", "#c03546", "#2e8540", "#8a4fbe", "#d97c0b", "#12807a", "#76552b", "#45494d",
];

/// Renders value-vs-step polylines, one per distinct key, as a standalone
/// SVG. Output is a deterministic function of the records. An empty
/// selection produces a chart stating that no records matched.
pub fn emit_plot(records: &[ExperimentRecord], path: impl AsRef<Path>) -> Result<()> {
    let svg = plot_svg(records);
    std::fs::write(path.as_ref(), svg).map_err(|e| Error::io(e, path.as_ref()))
}

pub fn plot_svg(records: &[ExperimentRecord]) -> String {
    let (w, h) = (640.0f64, 400.0f64);
    let (ml, mr, mt, mb) = (60.0, 20.0, 20.0, 45.0);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if records.is_empty() {
        out.push_str(
            "<text x=\"320\" y=\"200\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">no records selected</text>\n",
        );
        out.push_str("</svg>\n");
        return out;
    }

    let mut keys: Vec<String> = Vec::new();
    for r in records {
        let k = format!("{}/{}", phase_str(r), r.key);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let (mut xmin, mut xmax) = (f64::MAX, f64::MIN);
    let (mut ymin, mut ymax) = (f64::MAX, f64::MIN);
    for r in records {
        xmin = xmin.min(r.step as f64);
        xmax = xmax.max(r.step as f64);
        ymin = ymin.min(r.value);
        ymax = ymax.max(r.value);
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| ml + (x - xmin) / (xmax - xmin) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb);

    // axes
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"#333\"/>\n",
        h - mb
    ));
    for (pos, val) in [(xmin, xmin), (xmax, xmax)] {
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            sx(pos),
            h - mb + 16.0,
            val
        ));
    }
    for val in [ymin, ymax] {
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.4}</text>\n",
            ml - 6.0,
            sy(val) + 4.0,
            val
        ));
    }

    for (ki, key) in keys.iter().enumerate() {
        let color = PALETTE[ki % PALETTE.len()];
        let mut pts: Vec<(u64, f64)> = records
            .iter()
            .filter(|r| format!("{}/{}", phase_str(r), r.key) == *key)
            .map(|r| (r.step, r.value))
            .collect();
        pts.sort_by_key(|p| p.0);
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x as f64), sy(*y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{key}</text>\n",
            ml + 8.0,
            mt + 14.0 * (ki as f64 + 1.0)
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn phase_str(r: &ExperimentRecord) -> String {
    serde_json::to_value(r.phase)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| "unknown".into())
}

/// Writes an image batch as a PNG grid with 2-pixel separators; values are
/// mapped from `[-1, 1]` to 8-bit.
pub fn save_png_grid(images: &Array4<f32>, path: impl AsRef<Path>, cols: usize) -> Result<()> {
    let (n, c, h, w) = images.dim();
    if n == 0 {
        return Err(Error::contract("png grid: empty batch"));
    }
    if c != 1 && c != 3 {
        return Err(Error::contract(format!("png grid: {c} channels unsupported")));
    }
    let cols = cols.max(1).min(n);
    let rows = n.div_ceil(cols);
    let pad = 2usize;
    let gw = cols * w + (cols + 1) * pad;
    let gh = rows * h + (rows + 1) * pad;
    let mut img = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([24, 24, 24]));
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        let oy = pad + gy * (h + pad);
        let ox = pad + gx * (w + pad);
        for y in 0..h {
            for x in 0..w {
                let to8 = |v: f32| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                let px = if c == 3 {
                    image::Rgb([
                        to8(images[[i, 0, y, x]]),
                        to8(images[[i, 1, y, x]]),
                        to8(images[[i, 2, y, x]]),
                    ])
                } else {
                    let g = to8(images[[i, 0, y, x]]);
                    image::Rgb([g, g, g])
                };
                img.put_pixel((ox + x) as u32, (oy + y) as u32, px);
            }
        }
    }
    img.save(path.as_ref())
        .map_err(|e| Error::data(format!("{}: {e}", path.as_ref().display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::records::Phase;

    fn rec(key: &str, step: u64, value: f64) -> ExperimentRecord {
        ExperimentRecord {
            run_id: "r".into(),
            config_hash: "h".into(),
            phase: Phase::Pretrain,
            key: key.into(),
            step,
            value,
            wall_time: 0.0,
        }
    }

    #[test]
    fn csv_round_trip_preserves_nine_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let rows = vec![
            rec("loss_eps", 1, 0.123456789123),
            rec("loss_eps", 2, 3.14159265358979),
            rec("acc", 3, 1.0 / 3.0),
        ];
        emit_csv(&rows, &path).unwrap();
        let back = parse_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (orig, got) in rows.iter().zip(&back) {
            assert_eq!(got.1, orig.key);
            assert_eq!(got.2, orig.step);
            let rel = (got.3 - orig.value).abs() / orig.value.abs();
            assert!(rel < 1e-9, "{} vs {}", got.3, orig.value);
        }
        // header-only for zero rows
        let empty = dir.path().join("empty.csv");
        emit_csv(&[], &empty).unwrap();
        let text = std::fs::read_to_string(&empty).unwrap();
        assert_eq!(text.trim(), "phase,key,step,value");
        assert_eq!(parse_csv(&empty).unwrap().len(), 0);
    }

    #[test]
    fn plot_is_deterministic_and_handles_empty() {
        let rows = vec![rec("a", 1, 0.5), rec("a", 2, 0.25), rec("b", 1, 1.5)];
        let s1 = plot_svg(&rows);
        let s2 = plot_svg(&rows);
        assert_eq!(s1, s2);
        assert!(s1.contains("polyline"));
        assert!(s1.contains("pretrain/a"));
        let empty = plot_svg(&[]);
        assert!(empty.contains("no records selected"));
    }

    #[test]
    fn png_grid_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        let images = Array4::from_shape_fn((5, 3, 8, 8), |(n, c, y, x)| {
            ((n + c + y + x) as f32 * 0.1).sin()
        });
        save_png_grid(&images, &path, 3).unwrap();
        let img = image::open(&path).unwrap();
        // 3 cols x 2 rows of 8px plus separators
        assert_eq!(img.width(), (3 * 8 + 4 * 2) as u32);
        assert_eq!(img.height(), (2 * 8 + 3 * 2) as u32);
        assert!(save_png_grid(&Array4::zeros((0, 3, 4, 4)), &path, 2).is_err());
    }
}
