//! Synthetic scenes with templated questions and a symbolic oracle.
//!
//! Scenes hold 4 to 10 objects with four categorical attributes and a box.
//! Questions come from five template families. Each sample is generated
//! from its own seed derived from `(dataset seed, split, index)`, so any
//! split or prefix can be regenerated independently.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answer::AnswerSpace;
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::text::Vocabulary;
use crate::visual::RegionFeature;

/// Question length cap, including everything up to the question mark.
pub const MAX_QUESTION_LEN: usize = 16;
/// Width of the synthetic appearance vector.
pub const APPEARANCE_DIM: usize = 16;
const APPEARANCE_NOISE: f64 = 0.05;
const MIN_CENTER_GAP: f64 = 0.03;
const MAX_TRIES: usize = 10_000;

macro_rules! attribute {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

attribute!(Color {
    Gray => "gray", Red => "red", Blue => "blue", Green => "green",
    Brown => "brown", Purple => "purple", Cyan => "cyan", Yellow => "yellow",
});
attribute!(Shape { Cube => "cube", Sphere => "sphere", Cylinder => "cylinder" });
attribute!(Size { Small => "small", Large => "large" });
attribute!(Material { Rubber => "rubber", Metal => "metal" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Shape,
    Size,
    Material,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Color, Attribute::Shape, Attribute::Size, Attribute::Material];

    pub fn word(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Shape => "shape",
            Attribute::Size => "size",
            Attribute::Material => "material",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: Color,
    pub shape: Shape,
    pub size: Size,
    pub material: Material,
    /// `[x1, y1, x2, y2]` in the unit square.
    pub bbox: [f64; 4],
}

impl SceneObject {
    pub fn center_x(&self) -> f64 {
        0.5 * (self.bbox[0] + self.bbox[2])
    }

    pub fn value(&self, attr: Attribute) -> &'static str {
        match attr {
            Attribute::Color => self.color.word(),
            Attribute::Shape => self.shape.word(),
            Attribute::Size => self.size.word(),
            Attribute::Material => self.material.word(),
        }
    }

    fn key(&self) -> (Color, Shape, Size, Material) {
        (self.color, self.shape, self.size, self.material)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn validate(&self, max_objects: usize) -> Result<()> {
        let n = self.objects.len();
        if n < 2 || n > max_objects {
            return Err(Error::Invalid(format!("scene has {n} objects, allowed 2..={max_objects}")));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let [x1, y1, x2, y2] = o.bbox;
            if !o.bbox.iter().all(|v| (0.0..=1.0).contains(v)) || x1 >= x2 || y1 >= y2 {
                return Err(Error::Invalid(format!("object {i} has malformed box {:?}", o.bbox)));
            }
            if self.objects[..i].iter().any(|p| p.key() == o.key()) {
                return Err(Error::Invalid(format!("object {i} duplicates another object's attributes")));
            }
        }
        Ok(())
    }

    /// Region features seen by the model: one-hot attributes, a constant
    /// slot and Gaussian noise seeded by the scene.
    pub fn regions(&self) -> Vec<RegionFeature> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0xA11CE, 0));
        let noise = Normal::new(0.0, APPEARANCE_NOISE).expect("valid sigma");
        self.objects
            .iter()
            .map(|o| {
                let mut a = vec![0.0; APPEARANCE_DIM];
                a[o.color.index()] = 1.0;
                a[8 + o.shape.index()] = 1.0;
                a[11 + o.size.index()] = 1.0;
                a[13 + o.material.index()] = 1.0;
                a[15] = 1.0;
                for v in a.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
                RegionFeature { appearance: a, bbox: o.bbox }
            })
            .collect()
    }
}

/// Partial attribute description of an object; unset fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub size: Option<Size>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub color: Option<Color>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub material: Option<Material>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shape: Option<Shape>,
}

impl Descriptor {
    pub fn matches(&self, o: &SceneObject) -> bool {
        self.size.is_none_or(|v| v == o.size)
            && self.color.is_none_or(|v| v == o.color)
            && self.material.is_none_or(|v| v == o.material)
            && self.shape.is_none_or(|v| v == o.shape)
    }

    fn of(o: &SceneObject, attrs: &[Attribute]) -> Self {
        let mut d = Descriptor::default();
        for a in attrs {
            match a {
                Attribute::Color => d.color = Some(o.color),
                Attribute::Shape => d.shape = Some(o.shape),
                Attribute::Size => d.size = Some(o.size),
                Attribute::Material => d.material = Some(o.material),
            }
        }
        d
    }

    pub fn words(&self) -> Vec<&'static str> {
        let mut w = Vec::new();
        if let Some(v) = self.size {
            w.push(v.word());
        }
        if let Some(v) = self.color {
            w.push(v.word());
        }
        if let Some(v) = self.material {
            w.push(v.word());
        }
        w.push(self.shape.map_or("thing", Shape::word));
        w
    }

    fn select(&self, scene: &Scene) -> Vec<usize> {
        (0..scene.objects.len()).filter(|&i| self.matches(&scene.objects[i])).collect()
    }

    fn unique(&self, scene: &Scene) -> Result<usize> {
        match self.select(scene).as_slice() {
            [i] => Ok(*i),
            found => Err(Error::Oracle(format!("descriptor {:?} matches {} objects", self.words(), found.len()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Query,
    Exist,
    Count,
    Compare,
    Spatial,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Query, Family::Exist, Family::Count, Family::Compare, Family::Spatial];

    pub fn name(self) -> &'static str {
        match self {
            Family::Query => "query",
            Family::Exist => "exist",
            Family::Count => "count",
            Family::Compare => "compare",
            Family::Spatial => "spatial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown question family '{s}'")))
    }

    /// Answers this family can produce, in answer-space order.
    pub fn answers(self) -> Vec<&'static str> {
        match self {
            Family::Query => attribute_values(),
            Family::Exist | Family::Compare => vec!["yes", "no"],
            Family::Count => vec!["0", "1", "2", "3"],
            Family::Spatial => Shape::ALL.iter().map(|s| s.word()).collect(),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn attribute_values() -> Vec<&'static str> {
    let mut v: Vec<&str> = Color::ALL.iter().map(|c| c.word()).collect();
    v.extend(Shape::ALL.iter().map(|s| s.word()));
    v.extend(Size::ALL.iter().map(|s| s.word()));
    v.extend(Material::ALL.iter().map(|m| m.word()));
    v
}

/// Symbolic form of a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Program {
    /// "what <attr> is the <target> ?"
    Query { attribute: Attribute, target: Descriptor },
    /// "is there a <target> ?"
    Exist { target: Descriptor },
    /// "how many <target> are there ?"
    Count { target: Descriptor },
    /// "does the <a> have the same <attr> as the <b> ?"
    Compare { attribute: Attribute, a: Descriptor, b: Descriptor },
    /// "what is the shape of the object left of the <target> ?"
    LeftOf { target: Descriptor },
}

impl Program {
    pub fn family(&self) -> Family {
        match self {
            Program::Query { .. } => Family::Query,
            Program::Exist { .. } => Family::Exist,
            Program::Count { .. } => Family::Count,
            Program::Compare { .. } => Family::Compare,
            Program::LeftOf { .. } => Family::Spatial,
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut w: Vec<&str> = match self {
            Program::Query { attribute, target } => {
                let mut w = vec!["what", attribute.word(), "is", "the"];
                w.extend(target.words());
                w
            }
            Program::Exist { target } => {
                let mut w = vec!["is", "there", "a"];
                w.extend(target.words());
                w
            }
            Program::Count { target } => {
                let mut w = vec!["how", "many"];
                w.extend(target.words());
                w.extend(["are", "there"]);
                w
            }
            Program::Compare { attribute, a, b } => {
                let mut w = vec!["does", "the"];
                w.extend(a.words());
                w.extend(["have", "the", "same", attribute.word(), "as", "the"]);
                w.extend(b.words());
                w
            }
            Program::LeftOf { target } => {
                let mut w = vec!["what", "is", "the", "shape", "of", "the", "object", "left", "of", "the"];
                w.extend(target.words());
                w
            }
        };
        w.push("?");
        w.into_iter().map(String::from).collect()
    }
}

/// Object whose box center is nearest on the left of object `i`.
pub fn left_neighbor(scene: &Scene, i: usize) -> Option<usize> {
    let cx = scene.objects[i].center_x();
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.center_x() < cx)
        .max_by(|(_, a), (_, b)| a.center_x().total_cmp(&b.center_x()))
        .map(|(j, _)| j)
}

/// Evaluate a program on a scene.
pub fn oracle(scene: &Scene, program: &Program) -> Result<String> {
    let answer = match program {
        Program::Query { attribute, target } => scene.objects[target.unique(scene)?].value(*attribute).to_string(),
        Program::Exist { target } => yes_no(!target.select(scene).is_empty()),
        Program::Count { target } => target.select(scene).len().to_string(),
        Program::Compare { attribute, a, b } => {
            let (i, j) = (a.unique(scene)?, b.unique(scene)?);
            if i == j {
                return Err(Error::Oracle("comparison of an object with itself".into()));
            }
            yes_no(scene.objects[i].value(*attribute) == scene.objects[j].value(*attribute))
        }
        Program::LeftOf { target } => {
            let i = target.unique(scene)?;
            let j = left_neighbor(scene, i).ok_or_else(|| Error::Oracle("no object left of the target".into()))?;
            scene.objects[j].shape.word().to_string()
        }
    };
    Ok(answer)
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scene: Scene,
    pub question_tokens: Vec<String>,
    pub question_text: String,
    pub answer: String,
    #[serde(rename = "type")]
    pub family: Family,
    pub program: Program,
}

impl Sample {
    pub fn verify(&self, max_objects: usize) -> Result<()> {
        self.scene.validate(max_objects)?;
        if self.program.family() != self.family {
            return Err(Error::Oracle("type tag disagrees with program".into()));
        }
        if self.program.tokens() != self.question_tokens {
            return Err(Error::Oracle("question tokens disagree with program".into()));
        }
        let got = oracle(&self.scene, &self.program)?;
        if got != self.answer {
            return Err(Error::Oracle(format!("stored answer '{}' but oracle says '{got}'", self.answer)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub families: Vec<Family>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 5000,
            val: 1000,
            test: 1000,
            min_objects: 4,
            max_objects: 10,
            families: Family::ALL.to_vec(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 4 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object range {}..={} invalid (minimum 4 keeps relational templates answerable)",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > 12 {
            return Err(Error::Config("at most 12 objects fit with distinct horizontal positions".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Config("no question families selected".into()));
        }
        let mut f = self.families.clone();
        f.sort();
        f.dedup();
        if f.len() != self.families.len() {
            return Err(Error::Config("duplicate question family".into()));
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Stateless 64-bit mixing (splitmix64 finalizer over a combined key).
fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Uniformly sample a scene satisfying the invariants.
pub fn generate_scene<R: Rng>(rng: &mut R, min_objects: usize, max_objects: usize) -> Scene {
    let seed = rng.random();
    let n = rng.random_range(min_objects..=max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    while objects.len() < n {
        let size = *Size::ALL.choose(rng).expect("nonempty");
        let half = match size {
            Size::Small => 0.04,
            Size::Large => 0.07,
        };
        let cx: f64 = rng.random_range(0.08..0.92);
        let cy: f64 = rng.random_range(0.1..0.9);
        let o = SceneObject {
            color: *Color::ALL.choose(rng).expect("nonempty"),
            shape: *Shape::ALL.choose(rng).expect("nonempty"),
            size,
            material: *Material::ALL.choose(rng).expect("nonempty"),
            bbox: [round4(cx - half), round4(cy - half), round4(cx + half), round4(cy + half)],
        };
        let clash = objects
            .iter()
            .any(|p| p.key() == o.key() || (p.center_x() - o.center_x()).abs() < MIN_CENTER_GAP);
        if !clash {
            objects.push(o);
        }
    }
    Scene { seed, objects }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// All attribute subsets of the allowed attributes that single out object `i`.
fn unique_descriptors(scene: &Scene, i: usize, allowed: &[Attribute]) -> Vec<Descriptor> {
    let mut found = Vec::new();
    for mask in 1u32..(1 << allowed.len()) {
        let attrs: Vec<Attribute> = (0..allowed.len()).filter(|b| mask & (1 << b) != 0).map(|b| allowed[b]).collect();
        let d = Descriptor::of(&scene.objects[i], &attrs);
        if d.select(scene) == [i] {
            found.push(d);
        }
    }
    found
}

/// Prefer short descriptors: pick among the two smallest sizes present.
fn pick_descriptor<R: Rng>(rng: &mut R, mut options: Vec<Descriptor>) -> Option<Descriptor> {
    let len = |d: &Descriptor| d.words().len();
    options.sort_by_key(len);
    let min = len(options.first()?);
    options.retain(|d| len(d) <= min + 1);
    options.choose(rng).cloned()
}

fn all_descriptors(max_attrs: usize) -> Vec<Descriptor> {
    let mut out = Vec::new();
    let sizes: Vec<Option<Size>> = std::iter::once(None).chain(Size::ALL.iter().copied().map(Some)).collect();
    let colors: Vec<Option<Color>> = std::iter::once(None).chain(Color::ALL.iter().copied().map(Some)).collect();
    let mats: Vec<Option<Material>> = std::iter::once(None).chain(Material::ALL.iter().copied().map(Some)).collect();
    let shapes: Vec<Option<Shape>> = std::iter::once(None).chain(Shape::ALL.iter().copied().map(Some)).collect();
    for &size in &sizes {
        for &color in &colors {
            for &material in &mats {
                for &shape in &shapes {
                    let set = [size.is_some(), color.is_some(), material.is_some(), shape.is_some()];
                    let k = set.iter().filter(|b| **b).count();
                    if (1..=max_attrs).contains(&k) {
                        out.push(Descriptor { size, color, material, shape });
                    }
                }
            }
        }
    }
    out
}

fn attribute_of(value: &str) -> Attribute {
    if Color::ALL.iter().any(|c| c.word() == value) {
        Attribute::Color
    } else if Shape::ALL.iter().any(|c| c.word() == value) {
        Attribute::Shape
    } else if Size::ALL.iter().any(|c| c.word() == value) {
        Attribute::Size
    } else {
        Attribute::Material
    }
}

/// Try to phrase a question of `family` with answer `target` about `scene`.
fn question_for<R: Rng>(rng: &mut R, scene: &Scene, family: Family, target: &str) -> Option<Program> {
    let n = scene.objects.len();
    match family {
        Family::Query => {
            let attribute = attribute_of(target);
            let mut idx: Vec<usize> = (0..n).filter(|&i| scene.objects[i].value(attribute) == target).collect();
            idx.shuffle(rng);
            let allowed: Vec<Attribute> = Attribute::ALL.into_iter().filter(|a| *a != attribute).collect();
            idx.into_iter().find_map(|i| {
                pick_descriptor(rng, unique_descriptors(scene, i, &allowed)).map(|t| Program::Query { attribute, target: t })
            })
        }
        Family::Exist => {
            let want = target == "yes";
            let options: Vec<Descriptor> =
                all_descriptors(2).into_iter().filter(|d| d.select(scene).is_empty() != want).collect();
            options.choose(rng).cloned().map(|t| Program::Exist { target: t })
        }
        Family::Count => {
            let k: usize = target.parse().ok()?;
            let options: Vec<Descriptor> = all_descriptors(2).into_iter().filter(|d| d.select(scene).len() == k).collect();
            options.choose(rng).cloned().map(|t| Program::Count { target: t })
        }
        Family::Compare => {
            let attribute = *Attribute::ALL.choose(rng)?;
            let want = target == "yes";
            let allowed: Vec<Attribute> = Attribute::ALL.into_iter().filter(|a| *a != attribute).collect();
            let mut pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|&(i, j)| {
                    i != j && (scene.objects[i].value(attribute) == scene.objects[j].value(attribute)) == want
                })
                .collect();
            pairs.shuffle(rng);
            pairs.into_iter().find_map(|(i, j)| {
                let a = pick_descriptor(rng, unique_descriptors(scene, i, &allowed))?;
                let b = pick_descriptor(rng, unique_descriptors(scene, j, &allowed))?;
                Some(Program::Compare { attribute, a, b })
            })
        }
        Family::Spatial => {
            let mut idx: Vec<usize> = (0..n)
                .filter(|&i| left_neighbor(scene, i).is_some_and(|j| scene.objects[j].shape.word() == target))
                .collect();
            idx.shuffle(rng);
            idx.into_iter().find_map(|i| {
                pick_descriptor(rng, unique_descriptors(scene, i, &Attribute::ALL)).map(|t| Program::LeftOf { target: t })
            })
        }
    }
}

/// Family and answer assigned to sample `index`: families cycle, and the
/// answers of each family cycle in turn, so the split is balanced by
/// construction.
pub fn assignment(families: &[Family], index: usize) -> (Family, &'static str) {
    let family = families[index % families.len()];
    let answers = family.answers();
    (family, answers[(index / families.len()) % answers.len()])
}

/// Generate sample `index` of `split`.
pub fn generate_sample(cfg: &DataConfig, split: Split, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, split as u64 + 1, index as u64));
    let (family, target) = assignment(&cfg.families, index);
    for _ in 0..MAX_TRIES {
        let scene = generate_scene(&mut rng, cfg.min_objects, cfg.max_objects);
        if let Some(program) = question_for(&mut rng, &scene, family, target) {
            let tokens = program.tokens();
            if tokens.len() > MAX_QUESTION_LEN {
                continue;
            }
            let sample = Sample {
                question_text: question_text(&tokens),
                question_tokens: tokens,
                answer: oracle(&scene, &program)?,
                family,
                program,
                scene,
            };
            if sample.answer != target {
                return Err(Error::Oracle(format!("generated '{}' while targeting '{target}'", sample.answer)));
            }
            return Ok(sample);
        }
    }
    Err(Error::Oracle(format!("could not realize a {family} question answered '{target}'")))
}

fn question_text(tokens: &[String]) -> String {
    let mut s = tokens[..tokens.len() - 1].join(" ");
    s.push('?');
    if let Some(first) = s.get(..1) {
        s = first.to_uppercase() + &s[1..];
    }
    s
}

pub fn generate_split(cfg: &DataConfig, split: Split) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.size(split)).into_par_iter().map(|i| generate_sample(cfg, split, i)).collect()
}

/// Every word any template can emit, in a fixed order.
pub fn template_words() -> Vec<&'static str> {
    let mut words = vec![
        "what", "is", "the", "there", "a", "how", "many", "are", "does", "have", "same", "as", "of", "object",
        "left", "thing", "?",
    ];
    words.extend(Attribute::ALL.iter().map(|a| a.word()));
    words.extend(attribute_values());
    let mut seen = std::collections::HashSet::new();
    words.retain(|w| seen.insert(*w));
    words
}

pub fn vocabulary() -> Vocabulary {
    Vocabulary::new(template_words())
}

/// `yes, no, 0..3`, then attribute values.
pub fn answer_space() -> AnswerSpace {
    let mut a: Vec<String> = ["yes", "no", "0", "1", "2", "3"].iter().map(|s| s.to_string()).collect();
    a.extend(attribute_values().into_iter().map(String::from));
    AnswerSpace::new(a).expect("fixed answers are distinct")
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

/// Convert to model inputs.
pub fn encode(samples: &[Sample], vocab: &Vocabulary, answers: &AnswerSpace) -> Result<Vec<ModelInput>> {
    samples
        .iter()
        .map(|s| {
            Ok(ModelInput {
                tokens: vocab.encode(&s.question_tokens, MAX_QUESTION_LEN),
                regions: s.scene.regions(),
                label: answers.index_of(&s.answer)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAudit {
    pub count: usize,
    pub answers: BTreeMap<String, usize>,
    /// Largest absolute gap between an answer's share and `1 / #answers`.
    pub max_uniform_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub total: usize,
    pub answers: BTreeMap<String, usize>,
    pub majority_answer: String,
    pub majority_rate: f64,
    pub families: BTreeMap<String, FamilyAudit>,
}

pub const MAJORITY_LIMIT: f64 = 0.35;
pub const UNIFORM_TOLERANCE: f64 = 0.05;

impl Audit {
    pub fn of(samples: &[Sample]) -> Self {
        let mut answers: BTreeMap<String, usize> = BTreeMap::new();
        let mut families: BTreeMap<String, FamilyAudit> = BTreeMap::new();
        for s in samples {
            *answers.entry(s.answer.clone()).or_default() += 1;
            let f = families.entry(s.family.name().to_string()).or_insert_with(|| FamilyAudit {
                count: 0,
                answers: s.family.answers().into_iter().map(|a| (a.to_string(), 0)).collect(),
                max_uniform_gap: 0.0,
            });
            f.count += 1;
            *f.answers.entry(s.answer.clone()).or_default() += 1;
        }
        for f in families.values_mut() {
            let u = 1.0 / f.answers.len() as f64;
            f.max_uniform_gap =
                f.answers.values().map(|&c| (c as f64 / f.count as f64 - u).abs()).fold(0.0, f64::max);
        }
        let (majority_answer, top) =
            answers.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(a, &c)| (a.clone(), c)).unwrap_or_default();
        let total = samples.len();
        Self {
            total,
            answers,
            majority_answer,
            majority_rate: if total == 0 { 0.0 } else { top as f64 / total as f64 },
            families,
        }
    }

    pub fn passes(&self) -> bool {
        self.majority_rate <= MAJORITY_LIMIT && self.families.values().all(|f| f.max_uniform_gap <= UNIFORM_TOLERANCE)
    }

    pub fn check(&self) -> Result<()> {
        if self.majority_rate > MAJORITY_LIMIT {
            return Err(Error::Invalid(format!(
                "majority answer '{}' covers {:.1}% of samples",
                self.majority_answer,
                100.0 * self.majority_rate
            )));
        }
        if let Some((name, f)) = self.families.iter().find(|(_, f)| f.max_uniform_gap > UNIFORM_TOLERANCE) {
            return Err(Error::Invalid(format!("{name} answers deviate from uniform by {:.3}", f.max_uniform_gap)));
        }
        Ok(())
    }

    /// Accuracy of always answering the majority label of `reference` on `samples`.
    pub fn majority_baseline(reference: &[Sample], samples: &[Sample]) -> f64 {
        let top = Audit::of(reference).majority_answer;
        if samples.is_empty() {
            return 0.0;
        }
        samples.iter().filter(|s| s.answer == top).count() as f64 / samples.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(color: Color, shape: Shape, cx: f64) -> SceneObject {
        SceneObject {
            color,
            shape,
            size: Size::Small,
            material: Material::Rubber,
            bbox: [cx - 0.04, 0.4, cx + 0.04, 0.48],
        }
    }

    #[test]
    fn same_color_pair_answers_yes() {
        let scene = Scene { seed: 0, objects: vec![obj(Color::Red, Shape::Cube, 0.2), obj(Color::Red, Shape::Sphere, 0.6)] };
        let p = Program::Compare {
            attribute: Attribute::Color,
            a: Descriptor { shape: Some(Shape::Cube), ..Default::default() },
            b: Descriptor { shape: Some(Shape::Sphere), ..Default::default() },
        };
        assert_eq!(oracle(&scene, &p).unwrap(), "yes");
    }

    #[test]
    fn counts_three_spheres() {
        let scene = Scene {
            seed: 0,
            objects: vec![
                obj(Color::Red, Shape::Sphere, 0.1),
                obj(Color::Blue, Shape::Sphere, 0.3),
                obj(Color::Gray, Shape::Sphere, 0.5),
                obj(Color::Gray, Shape::Cube, 0.7),
            ],
        };
        let p = Program::Count { target: Descriptor { shape: Some(Shape::Sphere), ..Default::default() } };
        assert_eq!(oracle(&scene, &p).unwrap(), "3");
        let q = Program::Query { attribute: Attribute::Color, target: Descriptor { shape: Some(Shape::Cube), ..Default::default() } };
        assert_eq!(oracle(&scene, &q).unwrap(), "gray");
        let ambiguous = Program::Query { attribute: Attribute::Shape, target: Descriptor { color: Some(Color::Gray), ..Default::default() } };
        assert!(oracle(&scene, &ambiguous).is_err());
    }

    #[test]
    fn left_of_uses_nearest_center() {
        let scene = Scene {
            seed: 0,
            objects: vec![
                obj(Color::Red, Shape::Cylinder, 0.5),
                obj(Color::Blue, Shape::Cube, 0.1),
                obj(Color::Green, Shape::Sphere, 0.3),
            ],
        };
        let p = Program::LeftOf { target: Descriptor { color: Some(Color::Red), ..Default::default() } };
        assert_eq!(oracle(&scene, &p).unwrap(), "sphere");
        let none = Program::LeftOf { target: Descriptor { color: Some(Color::Blue), ..Default::default() } };
        assert!(oracle(&scene, &none).is_err());
    }

    #[test]
    fn scenes_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let s = generate_scene(&mut rng, 4, 10);
            s.validate(10).unwrap();
            assert!((4..=10).contains(&s.objects.len()));
        }
    }

    #[test]
    fn samples_are_reproducible_and_verified() {
        let cfg = DataConfig { train: 50, val: 10, test: 10, ..Default::default() };
        let a = generate_split(&cfg, Split::Train).unwrap();
        let b = generate_split(&cfg, Split::Train).unwrap();
        assert_eq!(a, b);
        for s in &a {
            s.verify(10).unwrap();
            assert!(s.question_tokens.len() <= MAX_QUESTION_LEN);
        }
        let val = generate_split(&cfg, Split::Val).unwrap();
        assert!(val.iter().all(|v| a.iter().all(|t| t.scene.seed != v.scene.seed)));
    }

    #[test]
    fn vocabulary_and_answers_cover_generated_data() {
        let cfg = DataConfig { train: 100, ..Default::default() };
        let vocab = vocabulary();
        let answers = answer_space();
        assert_eq!(answers.len(), 21);
        let samples = generate_split(&cfg, Split::Train).unwrap();
        for s in &samples {
            assert!(s.question_tokens.iter().all(|t| vocab.index_of(t) != crate::text::UNK));
        }
        let inputs = encode(&samples, &vocab, &answers).unwrap();
        assert_eq!(inputs[0].tokens.len(), MAX_QUESTION_LEN);
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = DataConfig { train: 20, ..Default::default() };
        let samples = generate_split(&cfg, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_jsonl(&path, &samples).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), samples);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("{\"scene\":{\"seed\":"));
    }

    #[test]
    fn majority_rule() {
        let cfg = DataConfig { train: 500, ..Default::default() };
        let samples = generate_split(&cfg, Split::Train).unwrap();
        let audit = Audit::of(&samples);
        audit.check().unwrap();
        assert!(audit.majority_rate <= 0.2 + 1e-9);
    }
}
