//! Procedural scenes of coloured shapes with relational captions.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::Image;
use crate::error::{Error, Result};

pub const CANVAS: usize = 64;
pub const GRID: usize = 4;
pub const CELL: usize = CANVAS / GRID;
pub const MAX_OBJECTS: usize = 3;
pub const MIN_RADIUS: usize = 4;
pub const MAX_RADIUS: usize = 7;
pub const BACKGROUND: [u8; 3] = [40, 40, 40];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [255, 0, 0],
            Color::Green => [0, 200, 0],
            Color::Blue => [0, 0, 255],
            Color::Yellow => [255, 255, 0],
            Color::White => [255, 255, 255],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
        }
    }

    pub fn index(self) -> usize {
        Color::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Whether the relation holds between cells `a` and `b`, given as `(row, col)`.
    pub fn holds(self, a: (usize, usize), b: (usize, usize)) -> bool {
        match self {
            Relation::LeftOf => a.1 < b.1,
            Relation::RightOf => a.1 > b.1,
            Relation::Above => a.0 < b.0,
            Relation::Below => a.0 > b.0,
        }
    }
}

macro_rules! parse_by_name {
    ($t:ty) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                <$t>::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::Data(format!("unknown {} {s:?}", stringify!($t).to_lowercase())))
            }
        }
    };
}
parse_by_name!(Color);
parse_by_name!(Shape);

/// One object: centred in cell `(row, col)` shifted by `(dx, dy)` pixels,
/// with half-extent `size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub dx: i32,
    pub dy: i32,
}

impl Object {
    /// Pixel coordinates of the centre, `(x, y)`.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.col * CELL + CELL / 2) as f64 + f64::from(self.dx),
            (self.row * CELL + CELL / 2) as f64 + f64::from(self.dy),
        )
    }

    fn covers(&self, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center();
        let r = self.size as f64;
        let (ddx, ddy) = (px - cx, py - cy);
        match self.shape {
            Shape::Circle => ddx * ddx + ddy * ddy <= r * r,
            Shape::Square => ddx.abs() <= r && ddy.abs() <= r,
            Shape::Triangle => ddy <= r && ddy >= -r && ddx.abs() <= (ddy + r) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub objects: Vec<Object>,
}

impl SceneSpec {
    pub fn render(&self) -> Image {
        let mut bytes = Vec::with_capacity(CANVAS * CANVAS * 3);
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let rgb = self
                    .objects
                    .iter()
                    .rev()
                    .find(|o| o.covers(px, py))
                    .map_or(BACKGROUND, |o| o.color.rgb());
                bytes.extend_from_slice(&rgb);
            }
        }
        Image::from_rgb8(CANVAS, CANVAS, &bytes).expect("canvas size is fixed")
    }

    /// `shape color row col size dx dy` per object, objects separated by `;`.
    pub fn serialize(&self) -> String {
        self.objects
            .iter()
            .map(|o| {
                format!(
                    "{} {} {} {} {} {} {}",
                    o.shape.name(),
                    o.color.name(),
                    o.row,
                    o.col,
                    o.size,
                    o.dx,
                    o.dy
                )
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let objects = s
            .split(';')
            .map(|part| {
                let f: Vec<&str> = part.split_whitespace().collect();
                if f.len() != 7 {
                    return Err(Error::Data(format!("object needs 7 fields: {part:?}")));
                }
                let num = |x: &str| x.parse::<i64>().map_err(|_| Error::Data(format!("bad number {x:?}")));
                let obj = Object {
                    shape: f[0].parse()?,
                    color: f[1].parse()?,
                    row: num(f[2])? as usize,
                    col: num(f[3])? as usize,
                    size: num(f[4])? as usize,
                    dx: num(f[5])? as i32,
                    dy: num(f[6])? as i32,
                };
                if obj.row >= GRID || obj.col >= GRID {
                    return Err(Error::Data(format!("cell out of grid: {part:?}")));
                }
                Ok(obj)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneSpec { objects })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedImage {
    pub id: String,
    pub image: Image,
    pub captions: [String; 2],
    pub scene: SceneSpec,
}

fn describe(o: &Object) -> String {
    format!("a {} {}", o.color.name(), o.shape.name())
}

/// Uniformly sampled scene: 1–3 objects in distinct cells.
pub fn sample_scene<R: Rng>(rng: &mut R) -> SceneSpec {
    let n = rng.gen_range(1..=MAX_OBJECTS);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let objects = cells[..n]
        .iter()
        .map(|&cell| {
            let size = rng.gen_range(MIN_RADIUS..=MAX_RADIUS);
            let slack = (MAX_RADIUS - size) as i32;
            Object {
                shape: *Shape::ALL.choose(rng).expect("non-empty"),
                color: *Color::ALL.choose(rng).expect("non-empty"),
                row: cell / GRID,
                col: cell % GRID,
                size,
                dx: rng.gen_range(-slack..=slack),
                dy: rng.gen_range(-slack..=slack),
            }
        })
        .collect();
    SceneSpec { objects }
}

/// Two captions true of `scene`. A single object yields its description twice;
/// otherwise two distinct relational captions where possible.
pub fn captions_for<R: Rng>(scene: &SceneSpec, rng: &mut R) -> Result<[String; 2]> {
    let objs = &scene.objects;
    if objs.is_empty() {
        return Err(Error::Data("scene without objects".into()));
    }
    if objs.len() == 1 {
        let c = describe(&objs[0]);
        return Ok([c.clone(), c]);
    }
    let mut out: Vec<String> = Vec::with_capacity(2);
    for attempt in 0..64 {
        let i = rng.gen_range(0..objs.len());
        let mut j = rng.gen_range(0..objs.len() - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (&objs[i], &objs[j]);
        let valid: Vec<Relation> = Relation::ALL
            .iter()
            .copied()
            .filter(|r| r.holds((a.row, a.col), (b.row, b.col)))
            .collect();
        let rel = *valid.choose(rng).expect("distinct cells satisfy some relation");
        let caption = format!("{} {} {}", describe(a), rel.phrase(), describe(b));
        if !caption_holds(&caption, scene)? {
            return Err(Error::Data(format!("generated caption is false: {caption}")));
        }
        if out.contains(&caption) && attempt < 63 {
            continue;
        }
        out.push(caption);
        if out.len() == 2 {
            break;
        }
    }
    Ok([out[0].clone(), out[1].clone()])
}

/// Decides whether a caption from the grammar is true of a scene.
///
/// Parses the words itself and locates objects by their rendered centre, so
/// it shares no code path with caption generation.
pub fn caption_holds(caption: &str, scene: &SceneSpec) -> Result<bool> {
    let w: Vec<&str> = caption.split_whitespace().collect();
    let noun = |at: usize| -> Result<(Color, Shape)> {
        if w.get(at) != Some(&"a") {
            return Err(Error::Data(format!("expected article in {caption:?}")));
        }
        let color = w
            .get(at + 1)
            .ok_or_else(|| Error::Data(format!("truncated caption {caption:?}")))?
            .parse()?;
        let shape = w
            .get(at + 2)
            .ok_or_else(|| Error::Data(format!("truncated caption {caption:?}")))?
            .parse()?;
        Ok((color, shape))
    };
    let cell_of = |o: &Object| {
        let (x, y) = o.center();
        ((y / CELL as f64).floor() as i64, (x / CELL as f64).floor() as i64)
    };
    let matching = |(color, shape): (Color, Shape)| -> Vec<(usize, (i64, i64))> {
        scene
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.color == color && o.shape == shape)
            .map(|(i, o)| (i, cell_of(o)))
            .collect()
    };
    let first = noun(0)?;
    if w.len() == 3 {
        return Ok(!matching(first).is_empty());
    }
    let (test, rest): (fn((i64, i64), (i64, i64)) -> bool, usize) = match (w.get(3), w.get(4)) {
        (Some(&"left"), Some(&"of")) => (|a, b| a.1 < b.1, 5),
        (Some(&"right"), Some(&"of")) => (|a, b| a.1 > b.1, 5),
        (Some(&"above"), _) => (|a, b| a.0 < b.0, 4),
        (Some(&"below"), _) => (|a, b| a.0 > b.0, 4),
        _ => return Err(Error::Data(format!("unknown relation in {caption:?}"))),
    };
    let second = noun(rest)?;
    if w.len() != rest + 3 {
        return Err(Error::Data(format!("trailing words in {caption:?}")));
    }
    let (xs, ys) = (matching(first), matching(second));
    Ok(xs
        .iter()
        .any(|&(i, a)| ys.iter().any(|&(j, b)| i != j && test(a, b))))
}

/// Every word the caption grammar can emit.
pub fn grammar_words() -> Vec<String> {
    let mut w: Vec<String> = ["a", "of", "left", "right", "above", "below"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    w.extend(Color::ALL.iter().map(|c| c.name().to_string()));
    w.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
    w.sort();
    w
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `n` captioned images with ids `first_id..first_id+n`, each drawn from its own
/// stream so the result does not depend on generation order.
pub fn generate(seed: u64, first_id: usize, n: usize) -> Result<Vec<CaptionedImage>> {
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    (first_id..first_id + n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let scene = sample_scene(&mut rng);
            let captions = captions_for(&scene, &mut rng)?;
            Ok(CaptionedImage {
                id: format!("{i:06}"),
                image: scene.render(),
                captions,
                scene,
            })
        })
        .collect()
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Sizes of the train/val/test splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 1000,
            val: 100,
            test: 200,
        }
    }
}

/// Generates the three splits with disjoint id ranges.
pub fn generate_splits(seed: u64, sizes: SplitSizes) -> Result<Vec<(&'static str, Vec<CaptionedImage>)>> {
    let mut first = 0;
    let mut out = Vec::new();
    for (name, n) in SPLITS.iter().zip([sizes.train, sizes.val, sizes.test]) {
        out.push((*name, generate(seed, first, n)?));
        first += n;
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.to_rgb8());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes, path)
}

/// Parses a binary PPM (P6, maxval 255); errors carry the byte offset.
pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |offset: usize, msg: &str| Error::format(path, offset as u64, msg);
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, "only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(err(pos, "zero image dimension"));
    }
    let need = w * h * 3;
    if bytes.len() - pos != need {
        return Err(err(
            bytes.len().min(pos + need),
            &format!("expected {need} pixel bytes, found {}", bytes.len() - pos),
        ));
    }
    Image::from_rgb8(h, w, &bytes[pos..])
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| {
        let offset = e.utf8_error().valid_up_to() as u64;
        Error::format(path, offset, "invalid UTF-8")
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `images/{id}.ppm`, `captions.tsv` and `scenes.tsv` under `dir`.
pub fn save(dataset: &[CaptionedImage], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut captions = String::new();
    let mut scenes = String::new();
    for item in dataset {
        write_ppm(&images.join(format!("{}.ppm", item.id)), &item.image)?;
        for c in &item.captions {
            captions.push_str(&format!("{}\t{}\n", item.id, c));
        }
        scenes.push_str(&format!("{}\t{}\n", item.id, item.scene.serialize()));
    }
    write_file(&dir.join("captions.tsv"), &captions)?;
    write_file(&dir.join("scenes.tsv"), &scenes)
}

/// Reads a split written by [`save`].
pub fn load(dir: &Path) -> Result<Vec<CaptionedImage>> {
    let scenes_path = dir.join("scenes.tsv");
    let captions_path = dir.join("captions.tsv");
    let scenes_text = read_utf8(&scenes_path)?;
    let captions_text = read_utf8(&captions_path)?;

    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in scenes_text.split_inclusive('\n') {
        let body = line.trim_end_matches('\n');
        if !body.is_empty() {
            let (id, spec) = body
                .split_once('\t')
                .ok_or_else(|| Error::format(&scenes_path, offset, "expected id<TAB>scene"))?;
            let scene = SceneSpec::parse(spec).map_err(|e| Error::format(&scenes_path, offset, e.to_string()))?;
            let image = read_ppm(&dir.join("images").join(format!("{id}.ppm")))?;
            out.push(CaptionedImage {
                id: id.to_string(),
                image,
                captions: [String::new(), String::new()],
                scene,
            });
        }
        offset += line.len() as u64;
    }

    let mut offset = 0u64;
    let mut filled = vec![0usize; out.len()];
    let mut cursor = 0;
    for line in captions_text.split_inclusive('\n') {
        let body = line.trim_end_matches('\n');
        if !body.is_empty() {
            let (id, caption) = body
                .split_once('\t')
                .ok_or_else(|| Error::format(&captions_path, offset, "expected id<TAB>caption"))?;
            while cursor < out.len() && filled[cursor] == 2 {
                cursor += 1;
            }
            if cursor >= out.len() || out[cursor].id != id {
                return Err(Error::format(
                    &captions_path,
                    offset,
                    format!("caption id {id} does not match scene order"),
                ));
            }
            out[cursor].captions[filled[cursor]] = caption.to_string();
            filled[cursor] += 1;
        }
        offset += line.len() as u64;
    }
    if let Some(i) = filled.iter().position(|&n| n != 2) {
        return Err(Error::format(
            &captions_path,
            offset,
            format!("image {} has {} captions, expected 2", out[i].id, filled[i]),
        ));
    }
    Ok(out)
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// Color-QA sample: question about the unique object of some shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorQuestion {
    pub image: usize,
    pub question: String,
    pub answer: usize,
}

/// Questions "what color is the {shape}" for every shape that occurs exactly
/// once in a scene; the answer is the colour index.
pub fn color_questions(data: &[CaptionedImage]) -> Vec<ColorQuestion> {
    let mut out = Vec::new();
    for (i, item) in data.iter().enumerate() {
        for shape in Shape::ALL {
            let hits: Vec<&Object> = item.scene.objects.iter().filter(|o| o.shape == shape).collect();
            if let [only] = hits[..] {
                out.push(ColorQuestion {
                    image: i,
                    question: format!("what color is the {}", shape.name()),
                    answer: only.color.index(),
                });
            }
        }
    }
    out
}

/// Two-image sample labelled by where the caption holds:
/// 0 neither, 1 left image only, 2 right image only, 3 both.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub left: usize,
    pub right: usize,
    pub caption: String,
    pub label: usize,
}

pub fn paired_samples<R: Rng>(data: &[CaptionedImage], n: usize, rng: &mut R) -> Result<Vec<PairedSample>> {
    if data.len() < 2 {
        return Err(Error::Data("paired samples need at least two images".into()));
    }
    (0..n)
        .map(|_| {
            let left = rng.gen_range(0..data.len());
            let mut right = rng.gen_range(0..data.len() - 1);
            if right >= left {
                right += 1;
            }
            let source = if rng.gen_bool(0.5) { left } else { right };
            let caption = data[source].captions[rng.gen_range(0..2)].clone();
            let l = caption_holds(&caption, &data[left].scene)?;
            let r = caption_holds(&caption, &data[right].scene)?;
            Ok(PairedSample {
                left,
                right,
                caption,
                label: usize::from(l) + 2 * usize::from(r),
            })
        })
        .collect()
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: Shape, color: Color, row: usize, col: usize) -> Object {
        Object {
            shape,
            color,
            row,
            col,
            size: 5,
            dx: 0,
            dy: 0,
        }
    }

    #[test]
    fn single_object_caption() {
        let scene = SceneSpec {
            objects: vec![obj(Shape::Circle, Color::Red, 1, 2)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let caps = captions_for(&scene, &mut rng).unwrap();
        assert_eq!(caps[0], "a red circle");
        assert!(caption_holds("a red circle", &scene).unwrap());
        assert!(!caption_holds("a blue circle", &scene).unwrap());
    }

    #[test]
    fn relation_semantics() {
        let scene = SceneSpec {
            objects: vec![obj(Shape::Circle, Color::Green, 0, 0), obj(Shape::Square, Color::Blue, 0, 3)],
        };
        assert!(caption_holds("a green circle left of a blue square", &scene).unwrap());
        assert!(!caption_holds("a green circle right of a blue square", &scene).unwrap());
        assert!(!caption_holds("a green circle above a blue square", &scene).unwrap());
        assert!(caption_holds("a blue square right of a green circle", &scene).unwrap());
    }

    #[test]
    fn objects_stay_inside_their_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let scene = sample_scene(&mut rng);
            for o in &scene.objects {
                assert!(o.size + o.dx.unsigned_abs() as usize <= MAX_RADIUS);
                assert!(o.size + o.dy.unsigned_abs() as usize <= MAX_RADIUS);
            }
            let mut cells: Vec<_> = scene.objects.iter().map(|o| (o.row, o.col)).collect();
            cells.sort_unstable();
            cells.dedup();
            assert_eq!(cells.len(), scene.objects.len());
        }
    }

    #[test]
    fn scene_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let scene = sample_scene(&mut rng);
            assert_eq!(SceneSpec::parse(&scene.serialize()).unwrap(), scene);
        }
    }

    #[test]
    fn ppm_fixture_bytes() {
        let img = Image::from_rgb8(2, 2, &[255, 0, 0].repeat(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.ppm");
        write_ppm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], [255, 0, 0].repeat(4).as_slice());
        assert_eq!(read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn ppm_errors_report_offsets() {
        let p = Path::new("x.ppm");
        match parse_ppm(b"P5\n1 1\n255\n\0\0\0", p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_ppm(b"P6\n2 x\n255\n", p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_ppm(b"P6\n1 1\n255\n\0\0", p), Err(Error::Format { .. })));
    }
}
