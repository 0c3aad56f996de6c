//! Deterministic raster plots: annotated line profiles and 2D scans with
//! sample-coordinate axes. Pixel row 0 of a scan (smallest y) is drawn at the
//! bottom of the plot.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::{AnalysisError, Extent, GaussianFit, Grid2D, Profile1D};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const RED: Rgb = [255, 0, 0];
const DATA_BLUE: Rgb = [30, 70, 200];
const FIT_GREEN: Rgb = [0, 150, 60];
const GRID_GRAY: Rgb = [225, 225, 225];

/// An RGB raster with a fixed 8×8 bitmap font.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Self {
        Canvas {
            width,
            height,
            pixels: vec![background; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn set(&mut self, x: i64, y: i64, color: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, color);
            }
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn rect_outline(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb) {
        self.line(x0, y0, x1, y0, color);
        self.line(x1, y0, x1, y1, color);
        self.line(x1, y1, x0, y1, color);
        self.line(x0, y1, x0, y0, color);
    }

    pub fn text_width(text: &str) -> i64 {
        8 * text.chars().count() as i64
    }

    pub fn text(&mut self, x: i64, y: i64, text: &str, color: Rgb) {
        for (i, ch) in text.chars().enumerate() {
            let glyph = font8x8::legacy::BASIC_LEGACY
                .get(ch as usize)
                .copied()
                .unwrap_or(font8x8::legacy::BASIC_LEGACY['?' as usize]);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        self.set(x + 8 * i as i64 + col, y + row as i64, color);
                    }
                }
            }
        }
    }

    /// Encodes as 8-bit RGB PNG with the annotation in a `Comment` text chunk.
    pub fn to_png(&self, comment: &str) -> Result<Vec<u8>, AnalysisError> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            encoder.set_color(png::ColorType::Rgb);
            encoder.set_depth(png::BitDepth::Eight);
            encoder
                .add_text_chunk("Comment".into(), comment.into())
                .map_err(|e| AnalysisError::Render(e.to_string()))?;
            let mut writer = encoder.write_header().map_err(|e| AnalysisError::Render(e.to_string()))?;
            let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
            writer
                .write_image_data(&bytes)
                .map_err(|e| AnalysisError::Render(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, comment: &str) -> Result<(), AnalysisError> {
        let bytes = self.to_png(comment)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| AnalysisError::Render(e.to_string()))?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| AnalysisError::Render(e.to_string()))?;
        file.write_all(&bytes).map_err(|e| AnalysisError::Render(e.to_string()))
    }
}

/// Tick spacing from the 1-2-5 sequence giving roughly `target` intervals.
pub fn nice_step(span: f64, target: usize) -> f64 {
    if !(span > 0.0) || !span.is_finite() {
        return 1.0;
    }
    let raw = span / target.max(1) as f64;
    let magnitude = 10f64.powf(raw.log10().floor());
    let norm = raw / magnitude;
    let factor = [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .find(|f| norm <= f * (1.0 + 1e-9))
        .unwrap_or(10.0);
    factor * magnitude
}

/// Round-number tick positions within `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let step = nice_step(hi - lo, target);
    let first = (lo / step - 1e-9).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last)
        .map(|k| {
            let v = k as f64 * step;
            if v == 0.0 {
                0.0
            } else {
                v
            }
        })
        .collect()
}

pub fn format_tick(value: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let s = format!("{value:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPlot {
    pub path: PathBuf,
    pub annotation: String,
    pub x_ticks: Vec<f64>,
    pub y_ticks: Vec<f64>,
}

struct Frame {
    left: i64,
    top: i64,
    width: i64,
    height: i64,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> i64 {
        let (a, b) = self.x_range;
        self.left + ((x - a) / (b - a) * self.width as f64).round() as i64
    }

    fn py(&self, y: f64) -> i64 {
        let (a, b) = self.y_range;
        self.top + self.height - ((y - a) / (b - a) * self.height as f64).round() as i64
    }

    fn axes(&self, canvas: &mut Canvas, gridlines: bool) -> (Vec<f64>, Vec<f64>) {
        let x_ticks = nice_ticks(self.x_range.0, self.x_range.1, 5);
        let y_ticks = nice_ticks(self.y_range.0, self.y_range.1, 5);
        let xs = nice_step(self.x_range.1 - self.x_range.0, 5);
        let ys = nice_step(self.y_range.1 - self.y_range.0, 5);
        let bottom = self.top + self.height;
        for &t in &x_ticks {
            let x = self.px(t);
            if gridlines {
                canvas.line(x, self.top + 1, x, bottom - 1, GRID_GRAY);
            }
            canvas.line(x, bottom, x, bottom + 4, BLACK);
            let label = format_tick(t, xs);
            canvas.text(x - Canvas::text_width(&label) / 2, bottom + 7, &label, BLACK);
        }
        for &t in &y_ticks {
            let y = self.py(t);
            if gridlines {
                canvas.line(self.left + 1, y, self.left + self.width - 1, y, GRID_GRAY);
            }
            canvas.line(self.left - 4, y, self.left, y, BLACK);
            let label = format_tick(t, ys);
            canvas.text(self.left - 7 - Canvas::text_width(&label), y - 4, &label, BLACK);
        }
        canvas.rect_outline(self.left, self.top, self.left + self.width, bottom, BLACK);
        (x_ticks, y_ticks)
    }
}

/// Intensity-versus-position plot with the fitted Gaussian overlaid and the
/// FWHM (or the absence of a peak) printed on the figure.
pub fn render_profile_plot(
    profile: &Profile1D,
    fit: Option<&GaussianFit>,
    title: &str,
    path: &Path,
) -> Result<RenderedPlot, AnalysisError> {
    if profile.is_empty() || profile.positions.len() != profile.intensities.len() {
        return Err(AnalysisError::Render("empty profile".into()));
    }
    let mut canvas = Canvas::new(480, 320, WHITE);
    let x_lo = profile.positions.iter().copied().fold(f64::INFINITY, f64::min);
    let mut x_hi = profile.positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    let mut y_lo = profile.intensities.iter().copied().fold(f64::INFINITY, f64::min);
    let mut y_hi = profile.intensities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if let Some(f) = fit {
        y_lo = y_lo.min(f.baseline);
        y_hi = y_hi.max(f.baseline + f.amplitude);
    }
    let pad = if y_hi > y_lo { 0.08 * (y_hi - y_lo) } else { 0.5 };
    let frame = Frame {
        left: 72,
        top: 36,
        width: 392,
        height: 240,
        x_range: (x_lo, x_hi),
        y_range: (y_lo - pad, y_hi + pad),
    };
    let (x_ticks, y_ticks) = frame.axes(&mut canvas, true);

    let points: Vec<(i64, i64)> = profile
        .positions
        .iter()
        .zip(&profile.intensities)
        .map(|(x, y)| (frame.px(*x), frame.py(*y)))
        .collect();
    for pair in points.windows(2) {
        canvas.line(pair[0].0, pair[0].1, pair[1].0, pair[1].1, DATA_BLUE);
    }
    for (x, y) in &points {
        canvas.fill_rect(x - 1, y - 1, 3, 3, DATA_BLUE);
    }
    let annotation = match fit {
        Some(f) => {
            let mut previous = None;
            for px in frame.left..=frame.left + frame.width {
                let x = x_lo + (px - frame.left) as f64 / frame.width as f64 * (x_hi - x_lo);
                let py = frame.py(f.eval(x)).clamp(frame.top, frame.top + frame.height);
                if let Some((qx, qy)) = previous {
                    canvas.line(qx, qy, px, py, FIT_GREEN);
                }
                previous = Some((px, py));
            }
            format!("FWHM={:.4}", f.fwhm)
        }
        None => "No discernible peak".to_string(),
    };
    canvas.text(frame.left + 6, frame.top + 6, &annotation, if fit.is_some() { FIT_GREEN } else { BLACK });
    canvas.text(frame.left, 12, title, BLACK);
    canvas.text(frame.left + frame.width / 2 - 32, 300, "position", BLACK);
    let comment = format!("{title}\n{annotation}");
    canvas.save(path, &comment)?;
    Ok(RenderedPlot {
        path: path.to_path_buf(),
        annotation,
        x_ticks,
        y_ticks,
    })
}

/// Where [`render_image_plot`] puts the image inside the PNG.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotArea {
    pub left: i64,
    pub top: i64,
    pub width: i64,
    pub height: i64,
    pub extent: Extent,
}

impl PlotArea {
    pub fn for_image(extent: &Extent) -> Self {
        const SIDE: f64 = 384.0;
        let scale = SIDE / extent.width().max(extent.height());
        PlotArea {
            left: 80,
            top: 36,
            width: ((extent.width() * scale).round() as i64).max(16),
            height: ((extent.height() * scale).round() as i64).max(16),
            extent: *extent,
        }
    }

    /// Sample coordinates at the centre of plot pixel `(px, py)`, counted
    /// from the top-left corner of the image area.
    pub fn to_sample(&self, px: i64, py: i64) -> (f64, f64) {
        let e = &self.extent;
        let x = e.x_min + (px as f64 + 0.5) / self.width as f64 * e.width();
        let y = e.y_max - (py as f64 + 0.5) / self.height as f64 * e.height();
        (x, y)
    }
}

/// Grayscale image of a scan with axis ticks in sample coordinates and an
/// optional red crosshair at `marker`.
pub fn render_image_plot(
    scan: &Grid2D,
    extent: &Extent,
    marker: Option<(f64, f64)>,
    title: &str,
    path: &Path,
) -> Result<RenderedPlot, AnalysisError> {
    if scan.rows == 0 || scan.cols == 0 {
        return Err(AnalysisError::Render("empty scan".into()));
    }
    if !(extent.width() > 0.0 && extent.height() > 0.0) {
        return Err(AnalysisError::Render("degenerate extent".into()));
    }
    let area = PlotArea::for_image(extent);
    let (width, height) = (area.width, area.height);
    let frame = Frame {
        left: area.left,
        top: area.top,
        width,
        height,
        x_range: (extent.x_min, extent.x_max),
        y_range: (extent.y_min, extent.y_max),
    };
    let mut canvas = Canvas::new((frame.left + width + 24) as usize, (frame.top + height + 36) as usize, WHITE);

    let lo = scan.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scan.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for py in 0..height {
        // bottom plot row shows data row 0
        let row = (((height - 1 - py) as f64 + 0.5) / height as f64 * scan.rows as f64) as usize;
        for px in 0..width {
            let col = ((px as f64 + 0.5) / width as f64 * scan.cols as f64) as usize;
            let v = scan.get(row.min(scan.rows - 1), col.min(scan.cols - 1));
            let level = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 };
            canvas.set(frame.left + px, frame.top + py, [level; 3]);
        }
    }
    let (x_ticks, y_ticks) = frame.axes(&mut canvas, false);
    if let Some((mx, my)) = marker {
        let (cx, cy) = (frame.px(mx), frame.py(my));
        for d in [-1, 0] {
            canvas.line(cx - 12, cy + d, cx + 12, cy + d, RED);
            canvas.line(cx + d, cy - 12, cx + d, cy + 12, RED);
        }
    }
    canvas.text(frame.left, 12, title, BLACK);
    canvas.save(path, title)?;
    Ok(RenderedPlot {
        path: path.to_path_buf(),
        annotation: title.to_string(),
        x_ticks,
        y_ticks,
    })
}

/// Reads the `Comment` text chunk written by the renderers.
pub fn read_png_comment(path: &Path) -> Option<String> {
    let file = std::fs::File::open(path).ok()?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let reader = decoder.read_info().ok()?;
    reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == "Comment")
        .map(|t| t.text.clone())
}

/// Decodes an 8-bit RGB PNG into a canvas.
pub fn read_png(path: &Path) -> Option<Canvas> {
    let file = std::fs::File::open(path).ok()?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file)).read_info().ok()?;
    let mut buf = vec![0; reader.output_buffer_size()?];
    let info = reader.next_frame(&mut buf).ok()?;
    if info.color_type != png::ColorType::Rgb {
        return None;
    }
    let pixels = buf[..info.buffer_size()].chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    Some(Canvas {
        width: info.width as usize,
        height: info.height as usize,
        pixels,
    })
}

/// Gray levels (0..1) of the image area of a plot written by
/// [`render_image_plot`], with row 0 at the bottom like the scan itself.
pub fn read_image_plot(path: &Path, extent: &Extent) -> Option<Grid2D> {
    let canvas = read_png(path)?;
    let area = PlotArea::for_image(extent);
    if ((area.left + area.width) as usize) > canvas.width || ((area.top + area.height) as usize) > canvas.height {
        return None;
    }
    let (rows, cols) = (area.height as usize, area.width as usize);
    Some(Grid2D::from_fn(rows, cols, |r, c| {
        let py = area.top as usize + rows - 1 - r;
        f64::from(canvas.get(area.left as usize + c, py)[0]) / 255.0
    }))
}

pub fn is_red(p: Rgb) -> bool {
    p[0] > 150 && p[1] < 90 && p[2] < 90
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::gaussian_fit;

    fn peak_profile() -> Profile1D {
        let xs: Vec<f64> = (0..41).map(|i| -4.0 + 0.2 * i as f64).collect();
        let ys = xs.iter().map(|x| (-x * x / 2.0).exp() + 0.1).collect();
        Profile1D::new(xs, ys)
    }

    #[test]
    fn tick_rule() {
        assert_eq!(nice_ticks(0.0, 100.0, 5), vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        assert_eq!(nice_step(10.0, 5), 2.0);
        assert_eq!(nice_step(7.0, 5), 2.0);
        assert_eq!(nice_step(0.8, 5), 0.2);
        assert_eq!(nice_ticks(-5.0, 5.0, 5), vec![-4.0, -2.0, 0.0, 2.0, 4.0]);
        assert_eq!(format_tick(0.4, 0.2), "0.4");
        assert_eq!(format_tick(-0.0, 0.2), "0.0");
        assert_eq!(format_tick(40.0, 20.0), "40");
    }

    #[test]
    fn profile_plot_annotations_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let profile = peak_profile();
        let fit = gaussian_fit(&profile).unwrap();
        let a = render_profile_plot(&profile, Some(&fit), "line scan", &dir.path().join("a.png")).unwrap();
        let b = render_profile_plot(&profile, Some(&fit), "line scan", &dir.path().join("b.png")).unwrap();
        assert!(a.annotation.contains("FWHM="));
        assert!(read_png_comment(&a.path).unwrap().contains("FWHM="));
        assert_eq!(std::fs::read(&a.path).unwrap(), std::fs::read(&b.path).unwrap());

        let none = render_profile_plot(&profile, None, "line scan", &dir.path().join("c.png")).unwrap();
        assert!(none.annotation.to_lowercase().contains("no discernible peak"));
    }

    #[test]
    fn image_plot_ticks_and_marker() {
        let dir = tempfile::tempdir().unwrap();
        let scan = Grid2D::from_fn(128, 128, |r, c| ((r * 7 + c * 3) % 17) as f64);
        let extent = Extent::new(0.0, 100.0, 0.0, 100.0);
        let plain = render_image_plot(&scan, &extent, None, "scan", &dir.path().join("p.png")).unwrap();
        assert_eq!(plain.x_ticks, vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        assert_eq!(plain.y_ticks, plain.x_ticks);
        let canvas = read_png(&plain.path).unwrap();
        assert!(!canvas.pixels().iter().any(|p| is_red(*p)));

        let marked = render_image_plot(&scan, &extent, Some((20.0, 30.0)), "scan", &dir.path().join("m.png")).unwrap();
        let canvas = read_png(&marked.path).unwrap();
        let reds: Vec<(usize, usize)> = (0..canvas.height)
            .flat_map(|y| (0..canvas.width).map(move |x| (x, y)))
            .filter(|&(x, y)| is_red(canvas.get(x, y)))
            .collect();
        assert!(!reds.is_empty());
        // crosshair centre sits at the sample point: x=20 → 80 + 76.8, y=30 → 36 + 384 − 115.2
        let mean_x = reds.iter().map(|p| p.0 as f64).sum::<f64>() / reds.len() as f64;
        let mean_y = reds.iter().map(|p| p.1 as f64).sum::<f64>() / reds.len() as f64;
        assert!((mean_x - 156.8).abs() < 2.0 && (mean_y - 304.8).abs() < 2.0, "{mean_x} {mean_y}");
    }

    #[test]
    fn row_zero_is_drawn_at_the_bottom() {
        let dir = tempfile::tempdir().unwrap();
        let scan = Grid2D::from_fn(16, 16, |r, _| if r == 0 { 1.0 } else { 0.0 });
        let plot = render_image_plot(&scan, &Extent::new(0.0, 16.0, 0.0, 16.0), None, "", &dir.path().join("o.png")).unwrap();
        let canvas = read_png(&plot.path).unwrap();
        // plot area spans rows 36..420 on the canvas
        assert_eq!(canvas.get(200, 418), WHITE);
        assert_eq!(canvas.get(200, 40), BLACK);
    }
}
