//! Schematic 2D face rendering for annotation and the embed-distance baseline.
//!
//! Geometry is an affine function of a handful of bound coefficients; every
//! other action is ignored. All upper-face controls draw strictly above the
//! horizontal mask boundary and all lower-face controls strictly below it, so
//! masking one half hides exactly one region's actions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::coeffs::{ActionVocabulary, CoefficientSet, Region};
use crate::error::{Error, Result};

/// Canvas fraction (from the top) where the upper and lower halves meet.
pub const MASK_BOUNDARY: f64 = 0.5;

const BACKGROUND: u8 = 255;
const SKIN: u8 = 220;
const EYE: u8 = 0;
const BROW: u8 = 40;
const MOUTH: u8 = 80;
const MASK: u8 = 128;

/// Vocabulary indices driving each geometric control.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureBindings {
    pub blink_left: Option<usize>,
    pub blink_right: Option<usize>,
    pub brow_raise: Option<usize>,
    pub brow_furrow: Option<usize>,
    pub brow_inner_up: Option<usize>,
    pub jaw_open: Option<usize>,
    pub mouth_stretch: Option<usize>,
    pub smile: Option<usize>,
    pub pucker: Option<usize>,
}

impl Default for FeatureBindings {
    fn default() -> Self {
        Self {
            blink_left: Some(0),
            blink_right: Some(1),
            brow_raise: Some(2),
            brow_furrow: Some(3),
            brow_inner_up: Some(4),
            jaw_open: Some(26),
            mouth_stretch: Some(27),
            smile: Some(28),
            pucker: Some(29),
        }
    }
}

impl FeatureBindings {
    fn entries(&self) -> [(&'static str, Option<usize>, Region); 9] {
        [
            ("blink_left", self.blink_left, Region::Upper),
            ("blink_right", self.blink_right, Region::Upper),
            ("brow_raise", self.brow_raise, Region::Upper),
            ("brow_furrow", self.brow_furrow, Region::Upper),
            ("brow_inner_up", self.brow_inner_up, Region::Upper),
            ("jaw_open", self.jaw_open, Region::Lower),
            ("mouth_stretch", self.mouth_stretch, Region::Lower),
            ("smile", self.smile, Region::Lower),
            ("pucker", self.pucker, Region::Lower),
        ]
    }
}

/// Neutral geometry in canvas-normalized units (y grows downward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeutralGeometry {
    pub eye_y: f64,
    pub eye_dx: f64,
    pub eye_half_width: f64,
    pub eye_aperture: f64,
    pub brow_y: f64,
    pub brow_range: f64,
    pub brow_tilt: f64,
    pub brow_half_length: f64,
    pub brow_thickness: f64,
    pub mouth_y: f64,
    pub mouth_half_width: f64,
    pub lip_gap: f64,
    pub jaw_range: f64,
    pub corner_lift: f64,
}

impl Default for NeutralGeometry {
    fn default() -> Self {
        Self {
            eye_y: 0.40,
            eye_dx: 0.15,
            eye_half_width: 0.08,
            eye_aperture: 0.04,
            brow_y: 0.30,
            brow_range: 0.05,
            brow_tilt: 0.03,
            brow_half_length: 0.09,
            brow_thickness: 0.015,
            mouth_y: 0.70,
            mouth_half_width: 0.12,
            lip_gap: 0.01,
            jaw_range: 0.12,
            corner_lift: 0.04,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSpec {
    /// SVG canvas edge in pixels.
    pub canvas: u32,
    pub bindings: FeatureBindings,
    pub neutral: NeutralGeometry,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            canvas: 256,
            bindings: FeatureBindings::default(),
            neutral: NeutralGeometry::default(),
        }
    }
}

impl RenderSpec {
    /// Checks bindings against the vocabulary: indices in range and each
    /// control bound to an action of the region it draws in.
    pub fn validate(&self, vocab: &ActionVocabulary) -> Result<()> {
        if self.canvas < 32 {
            return Err(Error::Config(format!("canvas {} < 32", self.canvas)));
        }
        for (name, index, region) in self.bindings.entries() {
            if let Some(i) = index {
                if i >= vocab.len() {
                    return Err(Error::Config(format!(
                        "binding {name} -> {i} outside vocabulary of {}",
                        vocab.len()
                    )));
                }
                if vocab.region_of(i) != region {
                    return Err(Error::Config(format!(
                        "binding {name} -> {} must be a {region} action",
                        vocab.name(i)
                    )));
                }
            }
        }
        let n = &self.neutral;
        let brow_top = n.brow_y - n.brow_range - n.brow_tilt - n.brow_thickness;
        let brow_bottom = n.brow_y + n.brow_range + n.brow_thickness;
        let eye_bottom = n.eye_y + n.eye_aperture;
        let mouth_top = n.mouth_y - n.corner_lift - n.lip_gap;
        let mouth_bottom = n.mouth_y + n.lip_gap + n.jaw_range;
        if brow_top <= 0.0 || brow_bottom.max(eye_bottom) >= MASK_BOUNDARY {
            return Err(Error::Config("upper-face geometry crosses the mask boundary".into()));
        }
        if mouth_top <= MASK_BOUNDARY || mouth_bottom >= 1.0 {
            return Err(Error::Config("lower-face geometry crosses the mask boundary".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub thickness: f64,
}

/// Resolved face geometry in normalized canvas units.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGeometry {
    pub head: Ellipse,
    pub eyes: [Ellipse; 2],
    pub brows: [Segment; 2],
    /// Left corner, upper lip, right corner, lower lip.
    pub mouth: [(f64, f64); 4],
}

impl FaceGeometry {
    pub fn mouth_height(&self) -> f64 {
        self.mouth[3].1 - self.mouth[1].1
    }
}

pub fn geometry(s: &CoefficientSet, spec: &RenderSpec) -> Result<FaceGeometry> {
    let b = &spec.bindings;
    let n = &spec.neutral;
    let get = |idx: Option<usize>| -> Result<f64> {
        match idx {
            None => Ok(0.0),
            Some(i) if i < s.len() => Ok(s.get(i)),
            Some(i) => Err(Error::Config(format!("binding index {i} >= {}", s.len()))),
        }
    };
    let blink = [get(b.blink_left)?, get(b.blink_right)?];
    let brow_offset = n.brow_range * (get(b.brow_raise)? - get(b.brow_furrow)?);
    let inner_lift = n.brow_tilt * get(b.brow_inner_up)?;
    let jaw = get(b.jaw_open)?;
    let stretch = get(b.mouth_stretch)?;
    let smile = get(b.smile)?;
    let pucker = get(b.pucker)?;

    let eye = |side: f64, blink: f64| Ellipse {
        cx: 0.5 + side * n.eye_dx,
        cy: n.eye_y,
        rx: n.eye_half_width,
        ry: n.eye_aperture * (1.0 - blink),
    };
    let brow_y = n.brow_y - brow_offset;
    let brow = |side: f64| {
        let cx = 0.5 + side * n.eye_dx;
        // Outer end first; the inner end (toward the midline) tilts up.
        Segment {
            x1: cx + side * n.brow_half_length,
            y1: brow_y,
            x2: cx - side * n.brow_half_length,
            y2: brow_y - inner_lift,
            thickness: n.brow_thickness,
        }
    };
    let half_width = n.mouth_half_width * (1.0 + 0.4 * stretch - 0.5 * pucker);
    let corner_y = n.mouth_y - n.corner_lift * smile;
    Ok(FaceGeometry {
        head: Ellipse {
            cx: 0.5,
            cy: 0.5,
            rx: 0.38,
            ry: 0.46,
        },
        eyes: [eye(-1.0, blink[0]), eye(1.0, blink[1])],
        brows: [brow(-1.0), brow(1.0)],
        mouth: [
            (0.5 - half_width, corner_y),
            (0.5, n.mouth_y - n.lip_gap),
            (0.5 + half_width, corner_y),
            (0.5, n.mouth_y + n.lip_gap + n.jaw_range * jaw),
        ],
    })
}

fn svg_body(g: &FaceGeometry, px: f64) -> String {
    let mut out = String::new();
    let c = |v: f64| v * px;
    let ellipse = |out: &mut String, id: &str, e: &Ellipse, fill: &str| {
        let _ = writeln!(
            out,
            r#"<ellipse id="{id}" cx="{:.3}" cy="{:.3}" rx="{:.3}" ry="{:.3}" fill="{fill}"/>"#,
            c(e.cx),
            c(e.cy),
            c(e.rx),
            c(e.ry)
        );
    };
    let _ = writeln!(
        out,
        r##"<rect x="0" y="0" width="{px:.0}" height="{px:.0}" fill="#ffffff"/>"##
    );
    ellipse(&mut out, "head", &g.head, "#dcdcdc");
    ellipse(&mut out, "eye-left", &g.eyes[0], "#000000");
    ellipse(&mut out, "eye-right", &g.eyes[1], "#000000");
    for (id, s) in [("brow-left", &g.brows[0]), ("brow-right", &g.brows[1])] {
        let _ = writeln!(
            out,
            r##"<line id="{id}" x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="#282828" stroke-width="{:.3}" stroke-linecap="round"/>"##,
            c(s.x1),
            c(s.y1),
            c(s.x2),
            c(s.y2),
            c(s.thickness)
        );
    }
    let points: Vec<String> = g
        .mouth
        .iter()
        .map(|(x, y)| format!("{:.3},{:.3}", c(*x), c(*y)))
        .collect();
    let _ = writeln!(
        out,
        r##"<polygon id="mouth" points="{}" fill="#505050"/>"##,
        points.join(" ")
    );
    out
}

fn svg_document(body: &str, px: u32) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{px}\" height=\"{px}\" viewBox=\"0 0 {px} {px}\">\n{body}</svg>\n"
    )
}

pub fn render_svg(s: &CoefficientSet, spec: &RenderSpec) -> Result<String> {
    let g = geometry(s, spec)?;
    Ok(svg_document(&svg_body(&g, spec.canvas as f64), spec.canvas))
}

/// The translucent band covering the half that is *not* being compared.
fn mask_band(region: Region) -> (f64, f64) {
    match region {
        Region::Upper => (MASK_BOUNDARY, 1.0),
        Region::Lower => (0.0, MASK_BOUNDARY),
    }
}

/// Same drawing as [`render_svg`] with the non-compared half masked.
pub fn render_region_highlight(
    s: &CoefficientSet,
    spec: &RenderSpec,
    region: Region,
) -> Result<String> {
    let g = geometry(s, spec)?;
    let px = spec.canvas as f64;
    let (top, bottom) = mask_band(region);
    let mut body = svg_body(&g, px);
    let _ = writeln!(
        body,
        r##"<rect id="region-mask" x="0" y="{:.3}" width="{px:.0}" height="{:.3}" fill="#808080" fill-opacity="0.6"/>"##,
        top * px,
        (bottom - top) * px
    );
    Ok(svg_document(&body, spec.canvas))
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.size + x]
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Mean squared per-pixel difference, in normalized intensity units.
    pub fn mean_sq_distance(&self, other: &Raster) -> Result<f64> {
        if self.size != other.size {
            return Err(Error::Dimension {
                expected: self.size,
                got: other.size,
            });
        }
        let total: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = (a as f64 - b as f64) / 255.0;
                d * d
            })
            .sum();
        Ok(total / self.pixels.len() as f64)
    }
}

fn inside_ellipse(e: &Ellipse, x: f64, y: f64) -> bool {
    if e.rx <= 0.0 || e.ry <= 0.0 {
        return false;
    }
    let dx = (x - e.cx) / e.rx;
    let dy = (y - e.cy) / e.ry;
    dx * dx + dy * dy <= 1.0
}

fn near_segment(s: &Segment, x: f64, y: f64) -> bool {
    let (vx, vy) = (s.x2 - s.x1, s.y2 - s.y1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((x - s.x1) * vx + (y - s.y1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (x - (s.x1 + t * vx), y - (s.y1 + t * vy));
    (dx * dx + dy * dy).sqrt() <= s.thickness / 2.0
}

fn inside_polygon(points: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = points.len() - 1;
    for i in 0..points.len() {
        let (xi, yi) = points[i];
        let (xj, yj) = points[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn render_raster(s: &CoefficientSet, spec: &RenderSpec, size: usize) -> Result<Raster> {
    if size < 32 {
        return Err(Error::OutOfRange(format!("raster size {size} < 32")));
    }
    let g = geometry(s, spec)?;
    let mut pixels = vec![BACKGROUND; size * size];
    for py in 0..size {
        let y = (py as f64 + 0.5) / size as f64;
        for px in 0..size {
            let x = (px as f64 + 0.5) / size as f64;
            let mut value = BACKGROUND;
            if inside_ellipse(&g.head, x, y) {
                value = SKIN;
            }
            if inside_polygon(&g.mouth, x, y) {
                value = MOUTH;
            }
            if g.brows.iter().any(|b| near_segment(b, x, y)) {
                value = BROW;
            }
            if g.eyes.iter().any(|e| inside_ellipse(e, x, y)) {
                value = EYE;
            }
            pixels[py * size + px] = value;
        }
    }
    Ok(Raster { size, pixels })
}

/// Raster with the non-compared half flattened to the mask tone.
pub fn render_raster_highlight(
    s: &CoefficientSet,
    spec: &RenderSpec,
    size: usize,
    region: Region,
) -> Result<Raster> {
    let mut r = render_raster(s, spec, size)?;
    let (top, bottom) = mask_band(region);
    for py in 0..size {
        let y = (py as f64 + 0.5) / size as f64;
        if y >= top && y < bottom {
            r.pixels[py * size..(py + 1) * size].fill(MASK);
        }
    }
    Ok(r)
}
