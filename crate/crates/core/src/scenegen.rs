//! Procedural traffic-like scenes with exact box labels.
//!
//! Scenes are drawn on an 8-bit integer canvas: two background bands (sky and
//! road) with speckle noise, then 1..n objects from the four harness classes.
//! All geometry is integer arithmetic, so a `(spec, index)` pair renders to the
//! same bytes on every platform. Each annotation is the tight bound of its
//! object's silhouette.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::dataset::{write_manifest, Annotation, ClassSet, ConditionTag, DatasetManifest, ImageRecord};
use crate::error::{io_err, DataError, ImageError};
use crate::imaging::{write_image, Image};
use crate::rng;

pub const CAR: usize = 0;
pub const BUS: usize = 1;
pub const PERSON: usize = 2;
pub const BICYCLE: usize = 3;

const MAX_PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub sky: [u8; 3],
    pub road: [u8; 3],
    /// Per-image jitter applied to the band colors.
    pub band_jitter: u8,
    /// Per-pixel uniform noise amplitude.
    pub speckle: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub objects_min: u32,
    pub objects_max: u32,
    /// Relative class frequencies, in canonical class order.
    pub class_weights: [u32; 4],
    /// Inclusive range of the principal object dimension in pixels, per class:
    /// width for car, bus and bicycle, height for person.
    pub scale_ranges: [[u32; 2]; 4],
    pub palette: Palette,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::voc_like(1)
    }
}

impl SceneSpec {
    /// Blue sky over grey asphalt.
    pub fn voc_like(seed: u64) -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            objects_min: 1,
            objects_max: 3,
            class_weights: [1, 1, 1, 1],
            scale_ranges: [[16, 34], [20, 36], [20, 36], [15, 30]],
            palette: Palette { sky: [150, 188, 228], road: [96, 96, 102], band_jitter: 18, speckle: 10 },
            seed,
        }
    }

    /// Overcast sky over a brown dirt road, with slightly smaller objects.
    pub fn coco_like(seed: u64) -> Self {
        SceneSpec {
            scale_ranges: [[15, 30], [18, 32], [20, 32], [15, 26]],
            palette: Palette { sky: [196, 198, 186], road: [124, 108, 82], band_jitter: 22, speckle: 16 },
            ..SceneSpec::voc_like(seed)
        }
    }

    /// Width and height of an object of `class` at principal size `s`.
    fn object_size(class: usize, s: u32) -> (u32, u32) {
        match class {
            CAR => (s, (s * 11 + 10) / 20),
            BUS => (s, (s * 7 + 5) / 10),
            PERSON => ((s * 2 + 2) / 5, s),
            _ => (s, (s * 3 + 2) / 5),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(format!("scene spec: {m}")));
        if self.width < 16 || self.height < 16 {
            return err("image must be at least 16x16".into());
        }
        if self.objects_min < 1 || self.objects_max < self.objects_min {
            return err(format!("bad object count range [{}, {}]", self.objects_min, self.objects_max));
        }
        if self.class_weights.iter().all(|&w| w == 0) {
            return err("all class weights are zero".into());
        }
        let side = self.width.min(self.height) as f64;
        for (class, [lo, hi]) in self.scale_ranges.iter().enumerate() {
            if lo > hi {
                return err(format!("class {class}: empty scale range"));
            }
            let (w0, h0) = Self::object_size(class, *lo);
            let (w1, h1) = Self::object_size(class, *hi);
            if w0.min(h0) < 8 {
                return err(format!("class {class}: objects smaller than 8 px"));
            }
            if w1.max(h1) as f64 > 0.6 * side {
                return err(format!("class {class}: objects larger than 60% of the image side"));
            }
        }
        Ok(())
    }
}

/// A drawn object: its class, placement and per-pixel colors in local
/// coordinates (`None` is transparent).
struct Sprite {
    class: usize,
    w: u32,
    h: u32,
    pixels: Vec<Option<[u8; 3]>>,
}

impl Sprite {
    fn new(class: usize, w: u32, h: u32) -> Self {
        Sprite { class, w, h, pixels: vec![None; (w * h) as usize] }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && x < self.w as i64 && y < self.h as i64 {
            self.pixels[(y as u32 * self.w + x as u32) as usize] = Some(c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x, y, c);
            }
        }
    }

    /// Disc of integer radius `r` around pixel `(cx, cy)`.
    fn disc(&mut self, cx: i64, cy: i64, r: i64, c: [u8; 3]) {
        self.ring(cx, cy, r, -1, c);
    }

    /// Pixels with `inner < dist <= r` (squared distances with a half-pixel rounding term).
    fn ring(&mut self, cx: i64, cy: i64, r: i64, inner: i64, c: [u8; 3]) {
        let outer2 = r * r + r;
        let inner2 = if inner < 0 { -1 } else { inner * inner + inner };
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                if d2 <= outer2 && d2 > inner2 {
                    self.put(x, y, c);
                }
            }
        }
    }

    /// Bresenham line, inclusive of both ends.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn thick_line(&mut self, a: (i64, i64), b: (i64, i64), thick: bool, c: [u8; 3]) {
        self.line(a, b, c);
        if thick {
            self.line((a.0 + 1, a.1), (b.0 + 1, b.1), c);
        }
    }

    /// Local bounds of the painted pixels, half-open.
    fn extent(&self) -> Option<(u32, u32, u32, u32)> {
        let mut ext: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.pixels[(y * self.w + x) as usize].is_some() {
                    let e = ext.get_or_insert((x, y, x + 1, y + 1));
                    *e = (e.0.min(x), e.1.min(y), e.2.max(x + 1), e.3.max(y + 1));
                }
            }
        }
        ext
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3], amount: u8) -> [u8; 3] {
    let a = amount as i32;
    c.map(|v| (v as i32 + rng.gen_range(-a..=a)).clamp(0, 255) as u8)
}

fn pick_jittered(rng: &mut ChaCha8Rng, options: &[[u8; 3]], amount: u8) -> [u8; 3] {
    let base = options[rng.gen_range(0..options.len())];
    jitter(rng, base, amount)
}

const DARK: [u8; 3] = [28, 28, 32];

fn draw_car(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Sprite {
    let mut s = Sprite::new(CAR, w, h);
    let (w, h) = (w as i64, h as i64);
    let body = pick_jittered(rng, &[[196, 40, 40], [40, 70, 190], [226, 226, 226], [46, 46, 52], [150, 156, 164], [40, 140, 64]], 14);
    let glass = jitter(rng, [120, 170, 200], 10);
    let r = (h / 4).max(2);
    let body_top = h * 2 / 5;
    s.rect(w / 5, 0, w - w / 5, body_top + 1, body);
    s.rect(w / 5 + 2, 2, w - w / 5 - 2, body_top, glass);
    s.rect(0, body_top, w, h - r, body);
    // rounded front and rear corners
    for (x, y) in [(0, body_top), (w - 1, body_top)] {
        s.pixels[(y * w + x) as usize] = None;
    }
    for cx in [r + 1, w - 2 - r] {
        s.disc(cx, h - 1 - r, r, DARK);
    }
    s
}

fn draw_bus(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Sprite {
    let mut s = Sprite::new(BUS, w, h);
    let (w, h) = (w as i64, h as i64);
    let body = pick_jittered(rng, &[[232, 188, 40], [230, 120, 32], [186, 40, 44], [226, 226, 216]], 12);
    let glass = jitter(rng, [140, 190, 215], 10);
    let r = (h / 7).max(2);
    s.rect(0, 0, w, h - r, body);
    let (wy0, wy1) = (h / 6, h / 6 + (h / 4).max(2));
    let pane = (w / 6).max(2);
    let mut x = 2;
    while x + pane < w - 1 {
        s.rect(x, wy0, x + pane, wy1, glass);
        x += pane + 2;
    }
    for cx in [w / 4, w - 1 - w / 4] {
        s.disc(cx, h - 1 - r, r, DARK);
    }
    s
}

fn draw_person(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Sprite {
    let mut s = Sprite::new(PERSON, w, h);
    let (w, h) = (w as i64, h as i64);
    let skin = pick_jittered(rng, &[[236, 196, 164], [196, 144, 108], [120, 84, 60]], 10);
    let shirt = pick_jittered(rng, &[[200, 50, 60], [50, 110, 200], [240, 220, 60], [60, 170, 90], [240, 240, 240], [150, 70, 170]], 16);
    let pants = pick_jittered(rng, &[[40, 50, 90], [50, 50, 50], [110, 90, 60]], 10);
    let rh = (w / 3).max(2);
    s.disc(w / 2, rh, rh, skin);
    let torso_top = 2 * rh + 1;
    let hip = h * 5 / 8;
    s.rect(0, torso_top + 1, w, hip, shirt);
    s.rect(1, torso_top, w - 1, torso_top + 1, shirt);
    let gap = (w / 6).max(1);
    s.rect(w / 8, hip, w / 2 - gap / 2, h, pants);
    s.rect(w / 2 + (gap + 1) / 2, hip, w - w / 8, h, pants);
    s
}

fn draw_bicycle(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Sprite {
    let mut s = Sprite::new(BICYCLE, w, h);
    let (w, h) = (w as i64, h as i64);
    let frame = pick_jittered(rng, &[[200, 30, 30], [30, 60, 200], [30, 30, 30], [230, 230, 230], [30, 160, 70]], 14);
    let r = ((h * 9) / 20).min((w * 5) / 21).max(3);
    let thick = w >= 22;
    let cy = h - 1 - r;
    let (rear, front) = ((r, cy), (w - 1 - r, cy));
    let tyre = if thick { r - 2 } else { r - 1 };
    s.ring(rear.0, rear.1, r, tyre, DARK);
    s.ring(front.0, front.1, r, tyre, DARK);
    let seat = (w * 2 / 5, h / 5);
    let crank = (w / 2, cy);
    let head = (w * 7 / 10, h / 5);
    s.thick_line(rear, seat, thick, frame);
    s.thick_line(seat, crank, thick, frame);
    s.thick_line(rear, crank, thick, frame);
    s.thick_line(crank, head, thick, frame);
    s.thick_line(seat, head, thick, frame);
    s.thick_line(head, front, thick, frame);
    s.thick_line((head.0, head.1), (head.0 + w / 12, 0), false, frame);
    s.rect(head.0 - 1, 0, head.0 + w / 8 + 1, 1, DARK);
    s.rect(seat.0 - 2, seat.1 - 1, seat.0 + 2, seat.1, DARK);
    s
}

fn draw(class: usize, rng: &mut ChaCha8Rng, w: u32, h: u32) -> Sprite {
    match class {
        CAR => draw_car(rng, w, h),
        BUS => draw_bus(rng, w, h),
        PERSON => draw_person(rng, w, h),
        _ => draw_bicycle(rng, w, h),
    }
}

/// A rendered scene with per-object silhouette masks, in placement order.
pub struct RenderedScene {
    pub image: Image,
    pub annotations: Vec<Annotation>,
    /// Full (unoccluded) silhouette of each object as image-space pixel coordinates.
    pub silhouettes: Vec<Vec<(u32, u32)>>,
    /// Visible pixel count of each object after occlusion.
    pub visible: Vec<usize>,
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let sky = jitter(rng, spec.palette.sky, spec.palette.band_jitter);
    let road = jitter(rng, spec.palette.road, spec.palette.band_jitter);
    let horizon = rng.gen_range(h * 3 / 10..=h * 11 / 20);
    let amp = spec.palette.speckle as i32;
    let mut px = vec![0u8; w * h * 3];
    for y in 0..h {
        let base = if y < horizon { sky } else { road };
        for x in 0..w {
            for c in 0..3 {
                let noise = if amp > 0 { rng.gen_range(-amp..=amp) } else { 0 };
                px[(y * w + x) * 3 + c] = (base[c] as i32 + noise).clamp(0, 255) as u8;
            }
        }
    }
    px
}

fn weighted_class(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> usize {
    let total: u32 = spec.class_weights.iter().sum();
    let mut ticket = rng.gen_range(0..total);
    for (class, &w) in spec.class_weights.iter().enumerate() {
        if ticket < w {
            return class;
        }
        ticket -= w;
    }
    unreachable!("ticket below total weight")
}

/// Renders scene `index`, also returning silhouettes for inspection.
pub fn render_scene_detailed(spec: &SceneSpec, index: u64) -> Result<RenderedScene, ImageError> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &format!("scene/{index}"));
    let (w, h) = (spec.width, spec.height);
    let mut canvas = background(spec, &mut rng);
    // owner[p] = 1 + object index of the top-most object at pixel p
    let mut owner = vec![0u16; (w * h) as usize];
    let mut placed: Vec<(Sprite, u32, u32)> = Vec::new();
    let mut full_area: Vec<usize> = Vec::new();

    let count = rng.gen_range(spec.objects_min..=spec.objects_max);
    for _ in 0..count {
        let class = weighted_class(spec, &mut rng);
        let [lo, hi] = spec.scale_ranges[class];
        let s = rng.gen_range(lo..=hi);
        let (ow, oh) = SceneSpec::object_size(class, s);
        let sprite = draw(class, &mut rng, ow, oh);
        let id = placed.len() as u16 + 1;
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x0 = rng.gen_range(0..=w - ow);
            let y0 = rng.gen_range(0..=h - oh);
            let mut trial = owner.clone();
            for ly in 0..oh {
                for lx in 0..ow {
                    if sprite.pixels[(ly * ow + lx) as usize].is_some() {
                        trial[((y0 + ly) * w + x0 + lx) as usize] = id;
                    }
                }
            }
            let mut visible = vec![0usize; placed.len()];
            for &o in &trial {
                if o != 0 && o != id {
                    visible[o as usize - 1] += 1;
                }
            }
            // at least 40% of every earlier object must stay visible
            if visible.iter().zip(&full_area).all(|(&v, &a)| v * 5 >= a * 2) {
                accepted = Some((x0, y0, trial));
                break;
            }
        }
        let (x0, y0, trial) = accepted.ok_or_else(|| {
            ImageError::Data(DataError::Record {
                index: index as usize,
                message: "could not place objects without excessive occlusion".into(),
            })
        })?;
        owner = trial;
        full_area.push(sprite.pixels.iter().filter(|p| p.is_some()).count());
        for ly in 0..oh {
            for lx in 0..ow {
                if let Some(c) = sprite.pixels[(ly * ow + lx) as usize] {
                    let p = (((y0 + ly) * w + x0 + lx) * 3) as usize;
                    canvas[p..p + 3].copy_from_slice(&c);
                }
            }
        }
        placed.push((sprite, x0, y0));
    }

    let mut annotations = Vec::with_capacity(placed.len());
    let mut silhouettes = Vec::with_capacity(placed.len());
    for (sprite, x0, y0) in &placed {
        let (ex0, ey0, ex1, ey1) = sprite.extent().expect("sprites are never empty");
        let bbox = BBox::new((x0 + ex0) as f64, (y0 + ey0) as f64, (x0 + ex1) as f64, (y0 + ey1) as f64)?;
        annotations.push(Annotation::new(bbox, sprite.class));
        let mut sil = Vec::new();
        for ly in 0..sprite.h {
            for lx in 0..sprite.w {
                if sprite.pixels[(ly * sprite.w + lx) as usize].is_some() {
                    sil.push((x0 + lx, y0 + ly));
                }
            }
        }
        silhouettes.push(sil);
    }
    let mut visible = vec![0usize; placed.len()];
    for &o in &owner {
        if o != 0 {
            visible[o as usize - 1] += 1;
        }
    }
    Ok(RenderedScene {
        image: Image::from_rgb8(w as usize, h as usize, &canvas),
        annotations,
        silhouettes,
        visible,
    })
}

pub fn render_scene(spec: &SceneSpec, index: u64) -> Result<(Image, Vec<Annotation>), ImageError> {
    render_scene_detailed(spec, index).map(|s| (s.image, s.annotations))
}

/// Image file name for scene `index`. The seed-derived suffix keeps names
/// distinct across datasets, which keys per-image corruption streams apart.
pub fn scene_file_name(spec: &SceneSpec, index: u64) -> String {
    format!("{index:05}_{:08x}.ppm", rng::derive_seed(spec.seed, "file-name") as u32)
}

/// Renders `n` scenes into `out_dir/images/` and writes `out_dir/manifest.tsv`.
pub fn generate_dataset(spec: &SceneSpec, n: usize, out_dir: &Path) -> Result<DatasetManifest, ImageError> {
    spec.validate()?;
    let mut m = DatasetManifest::empty(ClassSet::canonical(), format!("scene seed={}", spec.seed));
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(io_err::<ImageError>(&images))?;
    for index in 0..n as u64 {
        let (img, annotations) = render_scene(spec, index)?;
        let path = images.join(scene_file_name(spec, index));
        write_image(&img, &path)?;
        m.records.push(ImageRecord {
            image_path: path,
            width: spec.width,
            height: spec.height,
            annotations,
            condition: ConditionTag::Clean,
        });
    }
    write_manifest(&m, &out_dir.join("manifest.tsv"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let spec = SceneSpec::voc_like(5);
        for i in 0..5 {
            let (a, aa) = render_scene(&spec, i).unwrap();
            let (b, bb) = render_scene(&spec, i).unwrap();
            assert_eq!(a.to_rgb8(), b.to_rgb8());
            assert_eq!(aa, bb);
        }
    }

    #[test]
    fn single_object_scenes_have_one_annotation() {
        let spec = SceneSpec { objects_min: 1, objects_max: 1, ..SceneSpec::voc_like(2) };
        for i in 0..20 {
            assert_eq!(render_scene(&spec, i).unwrap().1.len(), 1);
        }
    }

    #[test]
    fn boxes_are_tight_and_inside_the_image() {
        for spec in [SceneSpec::voc_like(3), SceneSpec::coco_like(4)] {
            for i in 0..60 {
                let s = render_scene_detailed(&spec, i).unwrap();
                for ((a, sil), vis) in s.annotations.iter().zip(&s.silhouettes).zip(&s.visible) {
                    let b = a.bbox;
                    assert!(b.within(64.0, 64.0));
                    assert!(b.width().min(b.height()) >= 8.0, "{b:?}");
                    let xs = sil.iter().map(|p| p.0 as f64);
                    let ys = sil.iter().map(|p| p.1 as f64);
                    assert_eq!(xs.clone().fold(f64::MAX, f64::min), b.xmin);
                    assert_eq!(xs.fold(0.0, f64::max) + 1.0, b.xmax);
                    assert_eq!(ys.clone().fold(f64::MAX, f64::min), b.ymin);
                    assert_eq!(ys.fold(0.0, f64::max) + 1.0, b.ymax);
                    assert!(*vis * 5 >= sil.len() * 2, "object less than 40% visible");
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let too_big = SceneSpec { scale_ranges: [[16, 50], [20, 36], [20, 36], [15, 30]], ..SceneSpec::voc_like(0) };
        assert!(too_big.validate().is_err());
        let too_small = SceneSpec { scale_ranges: [[16, 34], [20, 36], [10, 36], [15, 30]], ..SceneSpec::voc_like(0) };
        assert!(too_small.validate().is_err());
        let no_objects = SceneSpec { objects_min: 0, ..SceneSpec::voc_like(0) };
        assert!(no_objects.validate().is_err());
    }

    #[test]
    fn empty_dataset_has_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&SceneSpec::voc_like(1), 0, dir.path()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn different_seeds_give_different_scenes() {
        let a = render_scene(&SceneSpec::voc_like(1), 0).unwrap().0;
        let b = render_scene(&SceneSpec::voc_like(2), 0).unwrap().0;
        assert_ne!(a, b);
    }
}
