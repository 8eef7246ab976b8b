//! Ellipse-field textures: a regular background of normal cells with one
//! atypical target region and, optionally, an atypical decoy region.

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::BoundingBox;
use crate::synth::bank::{Layout, TermBank, TermEntry, VisualParams};
use crate::synth::Magnification;

const STROMA: [f32; 3] = [234.0, 200.0, 218.0];
const LUMEN: [f32; 3] = [247.0, 241.0, 246.0];
const NUCLEUS_PALE: [f32; 3] = [176.0, 132.0, 196.0];
const NUCLEUS_DARK: [f32; 3] = [48.0, 16.0, 78.0];
const PIXEL_NOISE: f64 = 4.0;

const NOUN_PHRASES: [&str; 4] = [
    "tumor cells",
    "a cluster of tumor cells",
    "the region of tumor cells",
    "an area of atypical tumor cells",
];
const VERBS: [&str; 4] = ["with", "showing", "exhibiting", "displaying"];

/// Fully resolved rendering parameters of a cell population.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CellStyle {
    nucleus_scale: f64,
    elongation: f64,
    spacing_scale: f64,
    stain: f64,
    pleomorphism: f64,
    hue: f64,
    layout: Layout,
}

impl CellStyle {
    const NORMAL: CellStyle = CellStyle {
        nucleus_scale: 1.0,
        elongation: 1.15,
        spacing_scale: 1.0,
        stain: 0.3,
        pleomorphism: 0.06,
        hue: 0.0,
        layout: Layout::Grid,
    };

    const ATYPICAL: CellStyle = CellStyle {
        nucleus_scale: 1.25,
        elongation: 1.0,
        spacing_scale: 1.0,
        stain: 0.8,
        pleomorphism: 0.12,
        hue: 0.0,
        layout: Layout::Grid,
    };

    fn with(mut self, p: &VisualParams) -> Self {
        if let Some(v) = p.nucleus_scale {
            self.nucleus_scale = v;
        }
        if let Some(v) = p.elongation {
            self.elongation = v;
        }
        if let Some(v) = p.spacing_scale {
            self.spacing_scale = v;
        }
        if let Some(v) = p.stain {
            self.stain = v;
        }
        if let Some(v) = p.pleomorphism {
            self.pleomorphism = v;
        }
        if let Some(v) = p.hue {
            self.hue = v;
        }
        if let Some(v) = p.layout {
            self.layout = v;
        }
        self
    }

    fn from_terms(terms: &[&TermEntry]) -> Self {
        terms
            .iter()
            .fold(Self::ATYPICAL, |style, t| style.with(&t.visual_params))
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl Rect {
    fn overlaps_with_margin(&self, other: &Rect, margin: u32) -> bool {
        self.x0 < other.x1 + margin
            && other.x0 < self.x1 + margin
            && self.y0 < other.y1 + margin
            && other.y0 < self.y1 + margin
    }

    fn to_box(self, width: u32, height: u32) -> BoundingBox {
        let (w, h) = (width as f64, height as f64);
        BoundingBox::new(
            (self.x0 + self.x1) as f64 / 2.0 / w,
            (self.y0 + self.y1) as f64 / 2.0 / h,
            (self.x1 - self.x0) as f64 / w,
            (self.y1 - self.y0) as f64 / h,
        )
        .expect("region rectangles are non-empty and inside the image")
    }
}

struct Canvas {
    width: u32,
    height: u32,
    data: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![STROMA; (width * height) as usize],
        }
    }

    fn fill_rect(&mut self, r: &Rect, color: [f32; 3]) {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                self.data[(y * self.width + x) as usize] = color;
            }
        }
    }

    /// Filled ellipse with radii `(rx, ry)` rotated by `angle`, clipped to `clip`.
    #[allow(clippy::too_many_arguments)]
    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, color: [f32; 3], clip: &Rect) {
        let reach = rx.max(ry);
        let xs = ((cx - reach).floor().max(clip.x0 as f64)) as u32;
        let ys = ((cy - reach).floor().max(clip.y0 as f64)) as u32;
        let xe = ((cx + reach).ceil().min(clip.x1 as f64)).max(0.0) as u32;
        let ye = ((cy + reach).ceil().min(clip.y1 as f64)).max(0.0) as u32;
        let (sin, cos) = angle.sin_cos();
        for y in ys..ye {
            for x in xs..xe {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    self.data[(y * self.width + x) as usize] = color;
                }
            }
        }
    }

    fn into_image<R: Rng>(self, rng: &mut R) -> RgbImage {
        let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
        let mut img = RgbImage::new(self.width, self.height);
        for (i, px) in self.data.iter().enumerate() {
            let (x, y) = (i as u32 % self.width, i as u32 / self.width);
            let mut out = [0u8; 3];
            for c in 0..3 {
                let v = px[c] as f64 + noise.sample(rng);
                out[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(out));
        }
        img
    }
}

fn nucleus_color(style: &CellStyle) -> [f32; 3] {
    let t = style.stain.clamp(0.0, 1.0) as f32;
    let h = style.hue as f32;
    let mut c = [0f32; 3];
    for k in 0..3 {
        c[k] = NUCLEUS_PALE[k] + (NUCLEUS_DARK[k] - NUCLEUS_PALE[k]) * t;
    }
    c[0] -= 35.0 * h;
    c[2] += 25.0 * h;
    c.map(|v| v.clamp(0.0, 255.0))
}

fn cytoplasm_color(style: &CellStyle) -> [f32; 3] {
    let h = style.hue as f32;
    [
        (226.0 - 30.0 * h).clamp(0.0, 255.0),
        (186.0 - 6.0 * h).clamp(0.0, 255.0),
        (212.0 + 18.0 * h).clamp(0.0, 255.0),
    ]
}

/// Base nucleus radius and cell spacing in pixels for a 256-pixel crop.
fn base_geometry(mag: Magnification) -> (f64, f64) {
    match mag {
        Magnification::X40 => (5.5, 20.0),
        Magnification::X20 => (2.6, 9.0),
    }
}

struct Cell {
    x: f64,
    y: f64,
    /// Orientation override for aligned layouts.
    angle: Option<f64>,
}

fn place_cells<R: Rng>(rect: &Rect, style: &CellStyle, spacing: f64, rng: &mut R, canvas: &mut Canvas) -> Vec<Cell> {
    let (x0, y0, x1, y1) = (rect.x0 as f64, rect.y0 as f64, rect.x1 as f64, rect.y1 as f64);
    let mut cells = Vec::new();
    match style.layout {
        Layout::Grid | Layout::Disordered => {
            let (jitter, keep) = if style.layout == Layout::Grid {
                (0.22, 1.0)
            } else {
                (0.55, 0.75)
            };
            let mut row = 0;
            let mut y = y0 - spacing / 2.0;
            while y < y1 + spacing {
                let offset = if row % 2 == 1 { spacing / 2.0 } else { 0.0 };
                let mut x = x0 - spacing + offset;
                while x < x1 + spacing {
                    let jx = rng.random_range(-jitter..=jitter) * spacing;
                    let jy = rng.random_range(-jitter..=jitter) * spacing;
                    if rng.random::<f64>() < keep {
                        cells.push(Cell { x: x + jx, y: y + jy, angle: None });
                    }
                    x += spacing;
                }
                y += spacing * 0.87;
                row += 1;
            }
        }
        Layout::Lumens => {
            let pitch = 4.2 * spacing;
            let mut lumens = Vec::new();
            let mut y = y0 + pitch * 0.35;
            while y < y1 + pitch / 2.0 {
                let mut x = x0 + pitch * 0.35;
                while x < x1 + pitch / 2.0 {
                    let lx = x + rng.random_range(-0.3..=0.3) * spacing;
                    let ly = y + rng.random_range(-0.3..=0.3) * spacing;
                    let radius = 1.3 * spacing * rng.random_range(0.8..=1.2);
                    lumens.push((lx, ly, radius));
                    x += pitch;
                }
                y += pitch;
            }
            for &(lx, ly, radius) in &lumens {
                canvas.ellipse(lx, ly, radius, radius, 0.0, LUMEN, rect);
                let ring = radius + 0.55 * spacing;
                let count = ((std::f64::consts::TAU * ring) / (0.9 * spacing)).round().max(6.0) as usize;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for k in 0..count {
                    let a = phase + std::f64::consts::TAU * k as f64 / count as f64;
                    cells.push(Cell {
                        x: lx + ring * a.cos(),
                        y: ly + ring * a.sin(),
                        angle: Some(a + std::f64::consts::FRAC_PI_2),
                    });
                }
            }
            // Sparse filler between the glands.
            let mut y = y0;
            while y < y1 + spacing {
                let mut x = x0;
                while x < x1 + spacing {
                    let far = lumens
                        .iter()
                        .all(|&(lx, ly, r)| ((x - lx).powi(2) + (y - ly).powi(2)).sqrt() > r + 1.3 * spacing);
                    if far {
                        cells.push(Cell {
                            x: x + rng.random_range(-0.2..=0.2) * spacing,
                            y: y + rng.random_range(-0.2..=0.2) * spacing,
                            angle: None,
                        });
                    }
                    x += spacing;
                }
                y += spacing;
            }
        }
        Layout::Cords => {
            let horizontal = rng.random::<bool>();
            let (along0, along1, across0, across1) = if horizontal {
                (x0, x1, y0, y1)
            } else {
                (y0, y1, x0, x1)
            };
            let angle = if horizontal { 0.0 } else { std::f64::consts::FRAC_PI_2 };
            let mut across = across0 + rng.random_range(0.2..0.8) * spacing;
            while across < across1 + spacing {
                let mut along = along0 - rng.random_range(0.0..spacing);
                while along < along1 + spacing {
                    let a = along + rng.random_range(-0.1..=0.1) * spacing;
                    let b = across + rng.random_range(-0.1..=0.1) * spacing;
                    let (x, y) = if horizontal { (a, b) } else { (b, a) };
                    cells.push(Cell { x, y, angle: Some(angle) });
                    along += 0.75 * spacing;
                }
                across += 1.9 * spacing;
            }
        }
    }
    cells
}

fn paint_population<R: Rng>(
    canvas: &mut Canvas,
    rect: &Rect,
    style: &CellStyle,
    mag: Magnification,
    scale: f64,
    rng: &mut R,
) {
    let (base_r, base_s) = base_geometry(mag);
    let spacing = base_s * style.spacing_scale * scale;
    let radius = base_r * style.nucleus_scale * scale;
    let cells = place_cells(rect, style, spacing, rng, canvas);
    let size_noise = Normal::new(0.0, 1.0).expect("unit normal");
    let nucleus = nucleus_color(style);
    let cytoplasm = cytoplasm_color(style);
    let elong = style.elongation.max(1.0).sqrt();
    let sized: Vec<(f64, f64, f64, f64)> = cells
        .iter()
        .map(|c| {
            let jitter: f64 = size_noise.sample(rng);
            let r = radius * (1.0 + style.pleomorphism * jitter).clamp(0.4, 2.2);
            let angle = c.angle.unwrap_or_else(|| rng.random_range(0.0..std::f64::consts::PI));
            (c.x, c.y, r, angle)
        })
        .collect();
    for &(x, y, r, angle) in &sized {
        canvas.ellipse(x, y, 1.7 * r * elong, 1.7 * r / elong, angle, cytoplasm, rect);
    }
    for &(x, y, r, angle) in &sized {
        canvas.ellipse(x, y, r * elong, r / elong, angle, nucleus, rect);
    }
}

fn choose_terms<'a, R: Rng>(
    bank: &'a TermBank,
    mag: Magnification,
    exclude: &[&str],
    rng: &mut R,
) -> Vec<&'a TermEntry> {
    let usable = |t: &&TermEntry| !exclude.iter().any(|e| e.eq_ignore_ascii_case(&t.term));
    let primary: Vec<&TermEntry> = bank
        .terms
        .iter()
        .filter(|t| t.magnification_affinity.matches(mag) && t.magnification_affinity != super::Affinity::Both)
        .filter(usable)
        .collect();
    let mut chosen = vec![*primary.choose(rng).expect("bank validated for generation")];
    let extra = rng.random_range(1..=2);
    let mut pool: Vec<&TermEntry> = bank
        .terms
        .iter()
        .filter(|t| t.magnification_affinity.matches(mag))
        .filter(usable)
        .collect();
    pool.shuffle(rng);
    for cand in pool {
        if chosen.len() == 1 + extra {
            break;
        }
        let attrs = cand.visual_params.attributes();
        let clash = chosen.iter().any(|c| {
            c.term == cand.term || c.visual_params.attributes().iter().any(|a| attrs.contains(a))
        });
        if !clash {
            chosen.push(cand);
        }
    }
    chosen.shuffle(rng);
    chosen
}

fn build_expression<R: Rng>(terms: &[&TermEntry], rng: &mut R) -> String {
    let np = NOUN_PHRASES.choose(rng).expect("non-empty");
    let clauses: Vec<String> = terms
        .iter()
        .map(|t| format!("{} {}", VERBS.choose(rng).expect("non-empty"), t.term))
        .collect();
    match clauses.as_slice() {
        [only] => format!("{np} {only}"),
        [init @ .., last] => format!("{np} {} and {last}", init.join(", ")),
        [] => np.to_string(),
    }
}

fn random_rect<R: Rng>(width: u32, height: u32, lo: f64, hi: f64, rng: &mut R) -> Rect {
    let w = ((rng.random_range(lo..=hi) * width as f64).round() as u32).clamp(8, width);
    let h = ((rng.random_range(lo..=hi) * height as f64).round() as u32).clamp(8, height);
    let x0 = rng.random_range(0..=width - w);
    let y0 = rng.random_range(0..=height - h);
    Rect { x0, y0, x1: x0 + w, y1: y0 + h }
}

#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub image: RgbImage,
    pub expression: String,
    pub terms: Vec<String>,
    pub box_: BoundingBox,
    pub decoy_box: Option<BoundingBox>,
}

/// Renders one sample. All randomness comes from `rng`.
pub fn render_sample<R: Rng>(
    bank: &TermBank,
    mag: Magnification,
    width: u32,
    height: u32,
    with_decoy: bool,
    rng: &mut R,
) -> RenderedSample {
    let scale = width.min(height) as f64 / 256.0;
    let target_terms = choose_terms(bank, mag, &[], rng);
    let expression = build_expression(&target_terms, rng);
    let target_style = CellStyle::from_terms(&target_terms);

    let decoy_style = if with_decoy {
        let exclude: Vec<&str> = target_terms.iter().map(|t| t.term.as_str()).collect();
        let mut style = None;
        for _ in 0..64 {
            let terms = choose_terms(bank, mag, &exclude, rng);
            let candidate = CellStyle::from_terms(&terms);
            if candidate != target_style {
                style = Some(candidate);
                break;
            }
        }
        style
    } else {
        None
    };

    let (mut lo, mut hi) = (0.25, 0.45);
    let (target_rect, decoy_rect) = loop {
        let target = random_rect(width, height, lo, hi, rng);
        if decoy_style.is_none() {
            break (target, None);
        }
        let margin = (24.0 * scale).round() as u32;
        let found = (0..200)
            .map(|_| random_rect(width, height, lo, hi, rng))
            .find(|d| !d.overlaps_with_margin(&target, margin));
        if let Some(d) = found {
            break (target, Some(d));
        }
        lo *= 0.85;
        hi *= 0.85;
    };

    let mut canvas = Canvas::new(width, height);
    let full = Rect { x0: 0, y0: 0, x1: width, y1: height };
    paint_population(&mut canvas, &full, &CellStyle::NORMAL, mag, scale, rng);
    canvas.fill_rect(&target_rect, STROMA);
    paint_population(&mut canvas, &target_rect, &target_style, mag, scale, rng);
    if let (Some(rect), Some(style)) = (decoy_rect, decoy_style) {
        canvas.fill_rect(&rect, STROMA);
        paint_population(&mut canvas, &rect, &style, mag, scale, rng);
    }
    let image = canvas.into_image(rng);

    RenderedSample {
        image,
        expression,
        terms: target_terms.iter().map(|t| t.term.clone()).collect(),
        box_: target_rect.to_box(width, height),
        decoy_box: decoy_rect.map(|r| r.to_box(width, height)),
    }
}
