//! Overlay rendering: ground-truth and predicted ellipse outlines drawn
//! over a grayscale scene. Output is a binary RGB pixel map (P6) with an
//! optional SVG sidecar; both are pure functions of their inputs.

use ellipsedet::synth::Image;
use ellipsedet::Ellipse;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::CliError;

pub const COLOR_GT: [u8; 3] = [255, 0, 0];
pub const COLOR_PRED_THORAX: [u8; 3] = [0, 255, 255];
pub const COLOR_PRED_HEART: [u8; 3] = [0, 255, 0];

/// One curve to draw: an ellipse outline in a fixed color.
pub struct Outline {
    pub ellipse: Ellipse,
    pub color: [u8; 3],
}

pub struct Rgb {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Rgb {
    pub fn from_gray(image: &Image) -> Self {
        let mut data = Vec::with_capacity(image.width() * image.height() * 3);
        for &v in image.pixels() {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            data.extend_from_slice(&[g, g, g]);
        }
        Rgb { width: image.width(), height: image.height(), data }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let at = (y as usize * self.width + x as usize) * 3;
        self.data[at..at + 3].copy_from_slice(&color);
    }

    /// Draws a 1-px outline by sweeping the boundary parametrically at a
    /// step fine enough that consecutive samples land on adjacent pixels.
    pub fn draw_outline(&mut self, outline: &Outline) {
        let e = &outline.ellipse;
        let steps = (e.perimeter_approx() * 4.0).ceil().max(16.0) as usize;
        let (sin_t, cos_t) = e.theta().sin_cos();
        for i in 0..steps {
            let t = 2.0 * std::f64::consts::PI * i as f64 / steps as f64;
            let (lx, ly) = (e.a() * t.cos(), e.b() * t.sin());
            let x = e.cx() + lx * cos_t - ly * sin_t;
            let y = e.cy() + lx * sin_t + ly * cos_t;
            self.put(x.round() as i64, y.round() as i64, outline.color);
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), CliError> {
        let file = fs::File::create(path)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
        write!(w, "P6\n{} {}\n255\n", self.width, self.height).map_err(io_err)?;
        w.write_all(&self.data).map_err(io_err)?;
        Ok(())
    }
}

/// Renders the overlay: scene in grayscale, outlines on top in input order
/// (later outlines win where curves share a pixel).
pub fn render_overlay(image: &Image, outlines: &[Outline]) -> Rgb {
    let mut rgb = Rgb::from_gray(image);
    for outline in outlines {
        rgb.draw_outline(outline);
    }
    rgb
}

/// Writes an SVG sidecar with the same outlines as vector ellipses (no
/// raster background).
pub fn write_svg(
    path: &Path,
    width: usize,
    height: usize,
    outlines: &[Outline],
) -> Result<(), CliError> {
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    );
    for o in outlines {
        let e = &o.ellipse;
        let [r, g, b] = o.color;
        svg.push_str(&format!(
            "  <ellipse cx=\"{}\" cy=\"{}\" rx=\"{}\" ry=\"{}\" \
             transform=\"rotate({} {} {})\" fill=\"none\" \
             stroke=\"rgb({r},{g},{b})\" stroke-width=\"1\"/>\n",
            e.cx(),
            e.cy(),
            e.a(),
            e.b(),
            e.theta().to_degrees(),
            e.cx(),
            e.cy()
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}
