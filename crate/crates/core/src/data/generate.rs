use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{random_cell, Cell, CodeTable, Color, Shape, SymbolicImage, GRID_COLS, GRID_ROWS, JITTER_STD, PATCH_DIM};
use super::{DataError, Vocab};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaTask {
    Classification,
    Vqa,
    Retrieval,
}

impl MetaTask {
    pub const ALL: [MetaTask; 3] = [MetaTask::Classification, MetaTask::Vqa, MetaTask::Retrieval];

    pub fn name(self) -> &'static str {
        match self {
            MetaTask::Classification => "classification",
            MetaTask::Vqa => "vqa",
            MetaTask::Retrieval => "retrieval",
        }
    }

    pub fn parse(s: &str) -> Option<MetaTask> {
        MetaTask::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// One sample in "Block A, EOS, Block B" form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub meta_task: MetaTask,
    pub image: SymbolicImage,
    pub block_a_patches: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_a_text: Option<Vec<usize>>,
    pub block_b_text: Vec<usize>,
    pub pair_id: u64,
}

const NUMBERS: [&str; 4] = ["one", "two", "three", "four"];

fn position_words(r: usize, c: usize) -> [&'static str; 2] {
    [["top", "bottom"][r], ["left", "right"][c]]
}

/// Label naming the majority shape, qualified by attributes its cells share;
/// a bare plurality also lists the two minority shapes.
pub fn classification_label(img: &SymbolicImage) -> Result<Vec<&'static str>, DataError> {
    let mut counts: Vec<(usize, Shape)> = Shape::ALL.iter().map(|&s| (img.count_shape(s), s)).collect();
    counts.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let (k, major) = counts[0];
    if counts[1].0 == k {
        return Err(DataError::Invalid("image has no unique majority shape".into()));
    }
    let cells: Vec<&Cell> = img.cells.iter().filter(|c| c.shape == major).collect();
    let mut label = Vec::new();
    if let Some(size) = cells[0].size.filter(|&s| cells.iter().all(|c| c.size == Some(s))) {
        label.push(size.word());
    }
    if cells.iter().all(|c| c.color == cells[0].color) {
        label.push(cells[0].color.word());
    }
    label.push(major.word());
    if k * 2 <= img.cells.len() {
        let mut minor: Vec<Shape> = counts[1..].iter().filter(|(n, _)| *n > 0).map(|&(_, s)| s).collect();
        minor.sort();
        for (i, s) in minor.iter().enumerate() {
            label.push(if i == 0 { "with" } else { "and" });
            label.push(s.word());
        }
    }
    Ok(label)
}

/// Every label `classification_label` can produce on plain images.
pub fn classification_label_space() -> Vec<Vec<&'static str>> {
    let mut out = Vec::new();
    for major in Shape::ALL {
        let others: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != major).collect();
        let mut tails: Vec<Vec<&'static str>> = vec![vec![]];
        for i in 0..others.len() {
            for j in i + 1..others.len() {
                tails.push(vec!["with", others[i].word(), "and", others[j].word()]);
            }
        }
        for tail in &tails {
            let mut heads: Vec<Vec<&'static str>> = vec![vec![major.word()]];
            heads.extend(Color::ALL.iter().map(|c| vec![c.word(), major.word()]));
            for mut h in heads {
                h.extend(tail);
                out.push(h);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    Color(usize, usize),
    Shape(usize, usize),
    Object(usize, usize),
    Count(Shape),
    Row(usize),
    Column(usize),
}

impl Question {
    pub fn words(self) -> Vec<&'static str> {
        match self {
            Question::Color(r, c) => {
                let [a, b] = position_words(r, c);
                vec!["what", "color", "is", "the", a, b, "shape"]
            }
            Question::Shape(r, c) => {
                let [a, b] = position_words(r, c);
                vec!["what", "shape", "is", "at", "the", a, b]
            }
            Question::Object(r, c) => {
                let [a, b] = position_words(r, c);
                vec!["what", "is", "at", "the", a, b]
            }
            Question::Count(s) => vec!["how", "many", s.plural(), "are", "there"],
            Question::Row(r) => vec!["what", "is", "in", "the", ["top", "bottom"][r], "row"],
            Question::Column(c) => vec!["what", "is", "in", "the", ["left", "right"][c], "column"],
        }
    }

    pub fn parse(words: &[&str]) -> Option<Question> {
        let pos = |a: &str, b: &str| {
            let r = ["top", "bottom"].iter().position(|w| *w == a)?;
            let c = ["left", "right"].iter().position(|w| *w == b)?;
            Some((r, c))
        };
        match words {
            ["what", "color", "is", "the", a, b, "shape"] => pos(a, b).map(|(r, c)| Question::Color(r, c)),
            ["what", "shape", "is", "at", "the", a, b] => pos(a, b).map(|(r, c)| Question::Shape(r, c)),
            ["what", "is", "at", "the", a, b] => pos(a, b).map(|(r, c)| Question::Object(r, c)),
            ["how", "many", s, "are", "there"] => Shape::ALL.into_iter().find(|x| x.plural() == *s).map(Question::Count),
            ["what", "is", "in", "the", r, "row"] => ["top", "bottom"].iter().position(|w| w == r).map(Question::Row),
            ["what", "is", "in", "the", c, "column"] => ["left", "right"].iter().position(|w| w == c).map(Question::Column),
            _ => None,
        }
    }

    pub fn answer(self, img: &SymbolicImage) -> Vec<&'static str> {
        match self {
            Question::Color(r, c) => vec![img.cell(r, c).color.word()],
            Question::Shape(r, c) => vec![img.cell(r, c).shape.word()],
            Question::Object(r, c) => {
                let cell = img.cell(r, c);
                let mut w: Vec<&str> = cell.size.map(|s| s.word()).into_iter().collect();
                w.extend([cell.color.word(), cell.shape.word()]);
                w
            }
            Question::Count(s) => vec![NUMBERS[img.count_shape(s) - 1]],
            Question::Row(r) => pair_phrase(img.cell(r, 0), img.cell(r, 1)),
            Question::Column(c) => pair_phrase(img.cell(0, c), img.cell(1, c)),
        }
    }
}

fn pair_phrase(a: &Cell, b: &Cell) -> Vec<&'static str> {
    let mut w = a.phrase();
    w.push("and");
    w.extend(b.phrase());
    w
}

/// Every answer a plain-image question can have.
pub fn vqa_answer_space() -> Vec<Vec<&'static str>> {
    let mut out: Vec<Vec<&'static str>> = Color::ALL.iter().map(|c| vec![c.word()]).collect();
    out.extend(Shape::ALL.iter().map(|s| vec![s.word()]));
    out.extend(NUMBERS.iter().map(|n| vec![*n]));
    let objects: Vec<Cell> = Shape::ALL.iter().flat_map(|&s| Color::ALL.iter().map(move |&c| Cell::plain(s, c))).collect();
    out.extend(objects.iter().map(|o| o.phrase()));
    for a in &objects {
        for b in &objects {
            out.push(pair_phrase(a, b));
        }
    }
    out
}

/// Reading-order caption, e.g. `a red circle then a blue square ...`.
pub fn base_caption(img: &SymbolicImage) -> Vec<&'static str> {
    let mut w = Vec::new();
    for (i, cell) in img.cells.iter().enumerate() {
        if i > 0 {
            w.push("then");
        }
        w.push("a");
        w.extend(cell.phrase());
    }
    w
}

fn count_clause(n: usize, singular: &'static str, plural: &'static str, color: Option<Color>) -> Vec<&'static str> {
    let mut w = vec!["with", NUMBERS[n - 1]];
    w.extend(color.map(Color::word));
    w.push(if n == 1 { singular } else { plural });
    w
}

/// Optional summary clauses a caption may end with.
pub fn caption_clauses(img: &SymbolicImage) -> Vec<Vec<&'static str>> {
    let mut out = Vec::new();
    for s in Shape::ALL {
        let n = img.count_shape(s);
        if n > 0 {
            out.push(count_clause(n, s.word(), s.plural(), None));
        }
    }
    for c in Color::ALL {
        let n = img.count_color(c);
        if n > 0 {
            out.push(count_clause(n, "shape", "shapes", Some(c)));
        }
    }
    out
}

/// Deterministic instance generator over a frozen code table.
#[derive(Clone, Debug)]
pub struct Generator {
    pub codes: CodeTable,
    pub vocab: Vocab,
}

const P_FOUR: f64 = 0.30;
const P_THREE: f64 = 0.59;
const P_THEMED: f64 = 0.5;
const P_NO_CLAUSE: f64 = 0.35;
const P_SHAPE_CLAUSE: f64 = 0.35;

impl Generator {
    pub fn new(code_seed: u64) -> Result<Self, DataError> {
        Ok(Self { codes: CodeTable::new(code_seed)?, vocab: Vocab::standard() })
    }

    fn encode(&self, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| self.vocab.id(w).expect("template words are in the vocabulary")).collect()
    }

    fn finish(
        &self,
        task: MetaTask,
        image: SymbolicImage,
        question: Option<Vec<&str>>,
        target: Vec<&str>,
        seed: u64,
        pair_id: u64,
    ) -> TrainingInstance {
        TrainingInstance {
            meta_task: task,
            block_a_patches: self.codes.render(&image, rng::derive_seed(seed, &[1])),
            block_a_text: question.map(|q| self.encode(&q)),
            block_b_text: self.encode(&target),
            image,
            pair_id,
        }
    }

    pub fn generate(&self, task: MetaTask, seed: u64, hard: bool, pair_id: u64) -> TrainingInstance {
        let mut rng = rng::stream(seed, &[0]);
        match task {
            MetaTask::Classification => self.gen_classification(&mut rng, seed, hard, pair_id),
            MetaTask::Vqa => self.gen_vqa(&mut rng, seed, hard, pair_id),
            MetaTask::Retrieval => self.gen_retrieval(&mut rng, seed, hard, pair_id),
        }
    }

    pub fn random_image<R: Rng + ?Sized>(&self, rng: &mut R, hard: bool) -> SymbolicImage {
        let cells = (0..GRID_ROWS * GRID_COLS).map(|_| random_cell(rng, hard)).collect();
        SymbolicImage { rows: GRID_ROWS, cols: GRID_COLS, cells }
    }

    pub fn majority_image<R: Rng + ?Sized>(&self, rng: &mut R, hard: bool) -> SymbolicImage {
        let u: f64 = rng.random();
        let k = if u < P_FOUR { 4 } else if u < P_FOUR + P_THREE { 3 } else { 2 };
        let major = Shape::ALL[rng.random_range(0..4)];
        let mut others: Vec<Shape> = Shape::ALL.into_iter().filter(|&s| s != major).collect();
        others.shuffle(rng);
        let theme = rng.random_bool(P_THEMED).then(|| Color::ALL[rng.random_range(0..5)]);
        let size_theme = (hard && rng.random_bool(P_THEMED)).then(|| super::image::Size::ALL[rng.random_range(0..2)]);
        let mut cells = Vec::with_capacity(4);
        for i in 0..4 {
            let mut cell = random_cell(rng, hard);
            if i < k {
                cell.shape = major;
                if let Some(c) = theme {
                    cell.color = c;
                }
                if let Some(s) = size_theme {
                    cell.size = Some(s);
                }
            } else {
                cell.shape = others[i - k];
            }
            cells.push(cell);
        }
        cells.shuffle(rng);
        SymbolicImage { rows: GRID_ROWS, cols: GRID_COLS, cells }
    }

    pub fn gen_classification<R: Rng + ?Sized>(&self, rng: &mut R, seed: u64, hard: bool, pair_id: u64) -> TrainingInstance {
        let image = self.majority_image(rng, hard);
        let label = classification_label(&image).expect("majority images have a unique majority");
        self.finish(MetaTask::Classification, image, None, label, seed, pair_id)
    }

    pub fn gen_vqa<R: Rng + ?Sized>(&self, rng: &mut R, seed: u64, hard: bool, pair_id: u64) -> TrainingInstance {
        let image = self.random_image(rng, hard);
        let (r, c) = (rng.random_range(0..GRID_ROWS), rng.random_range(0..GRID_COLS));
        let u: f64 = rng.random();
        let q = if u < 0.17 {
            Question::Color(r, c)
        } else if u < 0.34 {
            Question::Shape(r, c)
        } else if u < 0.51 {
            Question::Object(r, c)
        } else if u < 0.68 {
            Question::Count(image.cell(r, c).shape)
        } else if u < 0.84 {
            Question::Row(r)
        } else {
            Question::Column(c)
        };
        let answer = q.answer(&image);
        self.finish(MetaTask::Vqa, image, Some(q.words()), answer, seed, pair_id)
    }

    pub fn gen_retrieval<R: Rng + ?Sized>(&self, rng: &mut R, seed: u64, hard: bool, pair_id: u64) -> TrainingInstance {
        let image = self.random_image(rng, hard);
        let mut caption = base_caption(&image);
        let u: f64 = rng.random();
        if u >= P_NO_CLAUSE {
            let clauses = caption_clauses(&image);
            let n_shape = Shape::ALL.iter().filter(|&&s| image.count_shape(s) > 0).count();
            let pick = if u < P_NO_CLAUSE + P_SHAPE_CLAUSE {
                rng.random_range(0..n_shape)
            } else {
                rng.random_range(n_shape..clauses.len())
            };
            caption.extend(&clauses[pick]);
        }
        self.finish(MetaTask::Retrieval, image, None, caption, seed, pair_id)
    }

    /// Checks that Block B follows from Block A under the templates and that
    /// the patches render the image.
    pub fn validate(&self, inst: &TrainingInstance) -> Result<(), DataError> {
        let img = &inst.image;
        SymbolicImage::new(img.rows, img.cols, img.cells.clone())?;
        if img.rows != GRID_ROWS || img.cols != GRID_COLS {
            return Err(DataError::Invalid(format!("unsupported grid {}x{}", img.rows, img.cols)));
        }
        if inst.block_b_text.is_empty() {
            return Err(DataError::Invalid("empty Block B".into()));
        }
        if inst.block_a_patches.len() != img.cells.len() {
            return Err(DataError::Invalid("patch count does not match grid".into()));
        }
        let limit = 6.0 * JITTER_STD * (PATCH_DIM as f64).sqrt();
        for (i, (patch, cell)) in inst.block_a_patches.iter().zip(&img.cells).enumerate() {
            let code = self.codes.code(cell);
            if patch.len() != PATCH_DIM {
                return Err(DataError::Invalid(format!("patch {i} has {} components", patch.len())));
            }
            let d = code.iter().zip(patch).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d > limit {
                return Err(DataError::Invalid(format!("patch {i} lies {d:.3} from its cell code")));
            }
        }
        let words = |ids: &[usize]| -> Result<Vec<&str>, DataError> {
            ids.iter().map(|&i| self.vocab.token(i).ok_or_else(|| DataError::UnknownWord(format!("id {i}")))).collect()
        };
        let target = words(&inst.block_b_text)?;
        let ok = match inst.meta_task {
            MetaTask::Classification => inst.block_a_text.is_none() && classification_label(img)? == target,
            MetaTask::Vqa => {
                let qtext = inst.block_a_text.as_ref().ok_or_else(|| DataError::Invalid("VQA without a question".into()))?;
                let q = Question::parse(&words(qtext)?).ok_or_else(|| DataError::Invalid("unrecognized question".into()))?;
                if let Question::Count(s) = q {
                    if img.count_shape(s) == 0 {
                        return Err(DataError::Invalid("count question about an absent shape".into()));
                    }
                }
                q.answer(img) == target
            }
            MetaTask::Retrieval => {
                let base = base_caption(img);
                inst.block_a_text.is_none()
                    && target.starts_with(&base)
                    && (target.len() == base.len() || caption_clauses(img).iter().any(|c| c[..] == target[base.len()..]))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(DataError::Invalid(format!("{} target {:?} does not follow from the image", inst.meta_task.name(), target.join(" "))))
        }
    }
}
