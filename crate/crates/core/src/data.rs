//! Multi-atlas subject data: synthetic multi-site generation, CSV
//! ingestion, padding, binary task selection, splits and batching.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use fedda_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, data, Error, Result};
use crate::rng::stream;

pub const TEMPLATES: usize = 8;
pub const MAX_REGIONS: usize = 246;
pub const CELLS: usize = TEMPLATES * MAX_REGIONS;

/// Default atlas templates and their region counts. The eighth row is a
/// filler duplicating the Brodmann layout.
pub const TEMPLATE_NAMES: [&str; TEMPLATES] = [
    "AAL1",
    "AAL2",
    "AAL3",
    "Brainnetome",
    "Brodmann",
    "Hammersmith",
    "HarvardOxford",
    "BrodmannFiller",
];
pub const TEMPLATE_LENGTHS: [usize; TEMPLATES] = [116, 120, 166, 246, 41, 83, 67, 41];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    A,
    B,
    C,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::A, Site::B, Site::C];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Site {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" => Ok(Site::A),
            "B" => Ok(Site::B),
            "C" => Ok(Site::C),
            _ => Err(format!("unknown site {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NC,
    MCI,
    AD,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::NC, Label::MCI, Label::AD];
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "NC" => Ok(Label::NC),
            "MCI" => Ok(Label::MCI),
            "AD" => Ok(Label::AD),
            _ => Err(format!("unknown label {s:?}")),
        }
    }
}

/// Zero-pads `v` to [`MAX_REGIONS`].
pub fn pad_to_max(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() > MAX_REGIONS {
        return Err(data(format!("vector of length {} exceeds {MAX_REGIONS}", v.len())));
    }
    let mut out = vec![0.0; MAX_REGIONS];
    out[..v.len()].copy_from_slice(v);
    Ok(out)
}

/// One subject's 8 × 246 template-by-region matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMatrix {
    values: Vec<f64>,
    template_lengths: [usize; TEMPLATES],
}

impl RoiMatrix {
    /// Builds from unpadded per-template vectors.
    pub fn from_templates(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != TEMPLATES {
            return Err(data(format!("expected {TEMPLATES} templates, got {}", rows.len())));
        }
        let mut values = Vec::with_capacity(CELLS);
        let mut template_lengths = [0; TEMPLATES];
        for (t, row) in rows.iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(data(format!("non-finite value {v} in template {t}")));
            }
            values.extend(pad_to_max(row)?);
            template_lengths[t] = row.len();
        }
        Ok(RoiMatrix {
            values,
            template_lengths,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn template_lengths(&self) -> &[usize; TEMPLATES] {
        &self.template_lengths
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * MAX_REGIONS..(t + 1) * MAX_REGIONS]
    }

    /// Unpadded values of template `t`.
    pub fn template(&self, t: usize) -> &[f64] {
        &self.row(t)[..self.template_lengths[t]]
    }

    /// True for cells inside the template's real length.
    pub fn is_valid_cell(&self, t: usize, r: usize) -> bool {
        r < self.template_lengths[t]
    }

    /// Overwrites a valid cell; padded cells stay zero.
    pub fn set_cell(&mut self, t: usize, r: usize, value: f64) {
        if self.is_valid_cell(t, r) {
            self.values[t * MAX_REGIONS + r] = value;
        }
    }

    /// Padded entries are all exactly zero.
    pub fn padding_is_zero(&self) -> bool {
        (0..TEMPLATES).all(|t| self.row(t)[self.template_lengths[t]..].iter().all(|v| *v == 0.0))
    }
}

/// A labeled subject with binary target `y` (1 = more impaired class).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub site: Site,
    pub label: Label,
    pub y: usize,
    pub roi: RoiMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub site: Site,
    pub label: Label,
    pub roi: RoiMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryTask {
    #[serde(rename = "NC_vs_AD")]
    NcVsAd,
    #[serde(rename = "MCI_vs_AD")]
    MciVsAd,
    #[serde(rename = "NC_vs_MCI")]
    NcVsMci,
}

impl BinaryTask {
    /// `(negative, positive)` classes.
    pub fn classes(self) -> (Label, Label) {
        match self {
            BinaryTask::NcVsAd => (Label::NC, Label::AD),
            BinaryTask::MciVsAd => (Label::MCI, Label::AD),
            BinaryTask::NcVsMci => (Label::NC, Label::MCI),
        }
    }
}

/// Keeps the two task classes and maps the more impaired one to `y = 1`.
pub fn make_binary_task(subjects: &[Subject], task: BinaryTask) -> Result<Vec<Example>> {
    let (neg, pos) = task.classes();
    for class in [neg, pos] {
        if !subjects.iter().any(|s| s.label == class) {
            return Err(data(format!("task {task:?} needs class {class} but none present")));
        }
    }
    Ok(subjects
        .iter()
        .filter(|s| s.label == neg || s.label == pos)
        .map(|s| Example {
            id: s.id.clone(),
            site: s.site,
            label: s.label,
            y: usize::from(s.label == pos),
            roi: s.roi.clone(),
        })
        .collect())
}

/// Flips the binary target of a `fraction` of examples chosen uniformly.
pub fn apply_label_noise<R: Rng + ?Sized>(examples: &mut [Example], fraction: f64, rng: &mut R) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(config(format!("label noise {fraction} outside [0, 1]")));
    }
    let n = (fraction * examples.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(rng);
    for &i in &idx[..n] {
        examples[i].y = 1 - examples[i].y;
    }
    Ok(n)
}

/// Stratified split by binary target; deterministic under `seed`.
pub fn split(examples: &[Example], train_frac: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(0.0 < train_frac && train_frac < 1.0) {
        return Err(config(format!("train_frac {train_frac} outside (0, 1)")));
    }
    let mut rng = stream(seed, "split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        classes.entry(e.y).or_default().push(i);
    }
    for (y, mut idx) in classes {
        if idx.len() < 2 {
            return Err(data(format!("class {y} has {} subject(s); split needs at least 2", idx.len())));
        }
        idx.shuffle(&mut rng);
        let n_train = ((train_frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend(idx[..n_train].iter().map(|&i| examples[i].clone()));
        test.extend(idx[n_train..].iter().map(|&i| examples[i].clone()));
    }
    Ok((train, test))
}

/// Shuffled mini-batches of indices. A trailing batch of one is merged
/// into the previous batch so train-mode normalization always sees ≥ 2.
pub fn batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(config(format!("batch size {batch_size} must be at least 2")));
    }
    if n < 2 {
        return Err(data(format!("cannot batch {n} sample(s); need at least 2")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    Ok(out)
}

/// Stacks examples into a `[B×8×246]` tensor.
pub fn batch_tensor<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Tensor {
    let mut values = Vec::new();
    let mut b = 0;
    for e in examples {
        values.extend_from_slice(e.roi.values());
        b += 1;
    }
    Tensor::new(vec![b, TEMPLATES, MAX_REGIONS], values).expect("finite ROI values")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSiteSpec {
    /// Subjects per class in `[NC, MCI, AD]` order.
    pub n_per_class: [usize; 3],
    pub mean_shift: f64,
    pub scale_shift: f64,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSiteSpec {
    fn default() -> Self {
        SyntheticSiteSpec {
            n_per_class: [120, 120, 60],
            mean_shift: 0.0,
            scale_shift: 1.0,
            class_separation: 2.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSiteSpec {
    fn validate(&self, site: Site) -> Result<()> {
        if self.n_per_class.iter().any(|&n| n < 4) {
            return Err(config(format!("site {site}: every class needs at least 4 subjects")));
        }
        for (name, v) in [("scale_shift", self.scale_shift), ("noise_sigma", self.noise_sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config(format!("site {site}: {name} = {v} must be positive")));
            }
        }
        for (name, v) in [("mean_shift", self.mean_shift), ("class_separation", self.class_separation)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!("site {site}: {name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Structure shared by all sites: anatomy baseline and class direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticShared {
    pub seed: u64,
    /// Number of cells carrying class signal; 0 spreads it over all cells.
    pub signal_cells: usize,
}

impl Default for SyntheticShared {
    fn default() -> Self {
        SyntheticShared {
            seed: 0,
            signal_cells: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSites {
    pub sites: [Vec<Subject>; 3],
    /// `(template, region)` cells carrying the class signal.
    pub signal_cells: Vec<(usize, usize)>,
}

fn valid_cells() -> Vec<(usize, usize)> {
    (0..TEMPLATES)
        .flat_map(|t| (0..TEMPLATE_LENGTHS[t]).map(move |r| (t, r)))
        .collect()
}

/// Draws three labeled sites from shared class prototypes under per-site
/// affine shift `x -> scale·x + mean_shift·u_site` plus Gaussian noise.
///
/// Prototypes are `b - s/2·d` (NC), `b` (MCI), `b + s/2·d` (AD) where `d` is
/// a unit vector over the signal cells, so NC and AD sit `s` apart.
pub fn generate_synthetic_sites(shared: &SyntheticShared, specs: &[SyntheticSiteSpec; 3]) -> Result<SyntheticSites> {
    for (site, spec) in Site::ALL.iter().zip(specs) {
        spec.validate(*site)?;
    }
    let cells = valid_cells();
    if shared.signal_cells > cells.len() {
        return Err(config(format!(
            "signal_cells = {} exceeds {} valid cells",
            shared.signal_cells,
            cells.len()
        )));
    }
    let mut rng = stream(shared.seed, "synthetic/shared");
    let base: Vec<f64> = cells.iter().map(|_| rng.sample(StandardNormal)).collect();
    let (signal_idx, direction) = if shared.signal_cells == 0 {
        let d: Vec<f64> = cells.iter().map(|_| rng.sample(StandardNormal)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        ((0..cells.len()).collect::<Vec<_>>(), d.into_iter().map(|v| v / norm).collect())
    } else {
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, cells.len(), shared.signal_cells).into_vec();
        idx.sort_unstable();
        let w = 1.0 / (shared.signal_cells as f64).sqrt();
        let mut d = vec![0.0; cells.len()];
        for &i in &idx {
            d[i] = if rng.gen::<bool>() { w } else { -w };
        }
        (idx, d)
    };

    let mut sites: [Vec<Subject>; 3] = Default::default();
    for (s, (site, spec)) in Site::ALL.iter().zip(specs).enumerate() {
        let mut rng = stream(spec.seed, &format!("synthetic/site/{site}"));
        let shift_dir: Vec<f64> = cells.iter().map(|_| rng.sample(StandardNormal)).collect();
        for (label, &n) in Label::ALL.iter().zip(&spec.n_per_class) {
            let coef = match label {
                Label::NC => -0.5,
                Label::MCI => 0.0,
                Label::AD => 0.5,
            } * spec.class_separation;
            for i in 0..n {
                let mut flat = vec![0.0; CELLS];
                for (c, &(t, r)) in cells.iter().enumerate() {
                    let proto = base[c] + coef * direction[c];
                    let noise: f64 = rng.sample(StandardNormal);
                    flat[t * MAX_REGIONS + r] =
                        spec.scale_shift * proto + spec.mean_shift * shift_dir[c] + spec.noise_sigma * noise;
                }
                sites[s].push(Subject {
                    id: format!("{site}-{label}-{i:04}"),
                    site: *site,
                    label: *label,
                    roi: RoiMatrix {
                        values: flat,
                        template_lengths: TEMPLATE_LENGTHS,
                    },
                });
            }
        }
    }
    Ok(SyntheticSites {
        sites,
        signal_cells: signal_idx.into_iter().map(|i| cells[i]).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvFormat {
    /// `subject_id,site,label,template,region_index,value`
    Long,
    /// `subject_id,site,label,template,v0..v245`; cells past a template's
    /// length are left empty.
    Wide,
}

const LONG_HEADER: [&str; 6] = ["subject_id", "site", "label", "template", "region_index", "value"];

fn parse_err(file: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line: line as usize,
        message: message.into(),
    }
}

struct Partial {
    site: Site,
    label: Label,
    line: u64,
    templates: HashMap<String, (u64, Vec<Option<f64>>)>,
}

/// Loads subjects from a CSV file, detecting long or wide format from the
/// header.
pub fn load_csv(path: &Path) -> Result<Vec<Subject>> {
    let file = std::fs::File::open(path)?;
    read_csv(file, &path.display().to_string())
}

/// Reads subjects from CSV text; `name` labels parse errors.
pub fn read_csv<R: Read>(reader: R, name: &str) -> Result<Vec<Subject>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let format = if header == LONG_HEADER {
        CsvFormat::Long
    } else if header.len() == 4 + MAX_REGIONS
        && header[..4] == LONG_HEADER[..4]
        && header[4..].iter().enumerate().all(|(i, h)| *h == format!("v{i}"))
    {
        CsvFormat::Wide
    } else {
        return Err(parse_err(name, 1, "unrecognized header; expected long or wide schema"));
    };

    let mut order: Vec<String> = Vec::new();
    let mut templates: Vec<String> = Vec::new();
    let mut subjects: HashMap<String, Partial> = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(parse_err(name, line, "empty subject_id"));
        }
        let site: Site = field(1).parse().map_err(|e| parse_err(name, line, e))?;
        let label: Label = field(2).parse().map_err(|e| parse_err(name, line, e))?;
        let template = field(3).to_string();
        if !templates.contains(&template) {
            if templates.len() == TEMPLATES {
                return Err(parse_err(name, line, format!("more than {TEMPLATES} templates declared")));
            }
            templates.push(template.clone());
        }
        let entry = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Partial {
                site,
                label,
                line,
                templates: HashMap::new(),
            }
        });
        if entry.site != site || entry.label != label {
            return Err(parse_err(name, line, format!("subject {id} changes site or label")));
        }
        let number = |s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(name, line, format!("non-numeric cell {s:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(name, line, format!("non-finite cell {s:?}")))
            }
        };
        match format {
            CsvFormat::Long => {
                let r: usize = field(4)
                    .parse()
                    .map_err(|_| parse_err(name, line, format!("bad region_index {:?}", field(4))))?;
                if r >= MAX_REGIONS {
                    return Err(parse_err(name, line, format!("region_index {r} ≥ {MAX_REGIONS}")));
                }
                let value = number(field(5))?;
                let (_, cells) = entry
                    .templates
                    .entry(template.clone())
                    .or_insert_with(|| (line, vec![None; MAX_REGIONS]));
                if cells[r].replace(value).is_some() {
                    return Err(parse_err(
                        name,
                        line,
                        format!("duplicate subject {id} template {template} region {r}"),
                    ));
                }
            }
            CsvFormat::Wide => {
                if entry.templates.contains_key(&template) {
                    return Err(parse_err(name, line, format!("duplicate subject {id} template {template}")));
                }
                let mut cells = vec![None; MAX_REGIONS];
                for (r, cell) in cells.iter_mut().enumerate() {
                    let s = field(4 + r);
                    if !s.is_empty() {
                        *cell = Some(number(s)?);
                    }
                }
                entry.templates.insert(template.clone(), (line, cells));
            }
        }
    }

    if templates.len() != TEMPLATES && !subjects.is_empty() {
        return Err(parse_err(
            name,
            1,
            format!("file declares {} templates, expected {TEMPLATES}", templates.len()),
        ));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let partial = subjects.remove(&id).expect("recorded subject");
        let mut rows = Vec::with_capacity(TEMPLATES);
        for template in &templates {
            let Some((line, cells)) = partial.templates.get(template) else {
                return Err(parse_err(
                    name,
                    partial.line,
                    format!("subject {id} is missing template {template}"),
                ));
            };
            let len = cells.iter().take_while(|c| c.is_some()).count();
            if cells[len..].iter().any(Option::is_some) {
                return Err(parse_err(
                    name,
                    *line,
                    format!("subject {id} template {template} has non-contiguous regions"),
                ));
            }
            if len == 0 {
                return Err(parse_err(name, *line, format!("subject {id} template {template} is empty")));
            }
            if let Some(k) = TEMPLATE_NAMES.iter().position(|n| n == template) {
                if len != TEMPLATE_LENGTHS[k] {
                    return Err(parse_err(
                        name,
                        *line,
                        format!(
                            "subject {id} template {template} has {len} regions, expected {}",
                            TEMPLATE_LENGTHS[k]
                        ),
                    ));
                }
            }
            rows.push(cells[..len].iter().map(|c| c.unwrap()).collect::<Vec<_>>());
        }
        out.push(Subject {
            id,
            site: partial.site,
            label: partial.label,
            roi: RoiMatrix::from_templates(&rows)?,
        });
    }
    Ok(out)
}

/// Writes subjects in the given format. `templates` names the eight rows.
pub fn write_csv<W: Write>(
    writer: W,
    subjects: &[Subject],
    templates: &[&str; TEMPLATES],
    format: CsvFormat,
) -> Result<()> {
    let unique: HashSet<&&str> = templates.iter().collect();
    if unique.len() != TEMPLATES {
        return Err(config("template names must be distinct"));
    }
    let mut w = csv::Writer::from_writer(writer);
    match format {
        CsvFormat::Long => w.write_record(LONG_HEADER)?,
        CsvFormat::Wide => {
            let mut h: Vec<String> = LONG_HEADER[..4].iter().map(|s| s.to_string()).collect();
            h.extend((0..MAX_REGIONS).map(|i| format!("v{i}")));
            w.write_record(&h)?;
        }
    }
    for s in subjects {
        let (site, label) = (s.site.to_string(), s.label.to_string());
        for (t, template) in templates.iter().enumerate() {
            let row = s.roi.template(t);
            match format {
                CsvFormat::Long => {
                    for (r, v) in row.iter().enumerate() {
                        w.write_record([&s.id, &site, &label, *template, &r.to_string(), &v.to_string()])?;
                    }
                }
                CsvFormat::Wide => {
                    let mut rec: Vec<String> = vec![s.id.clone(), site.clone(), label.clone(), template.to_string()];
                    rec.extend((0..MAX_REGIONS).map(|r| row.get(r).map_or(String::new(), f64::to_string)));
                    w.write_record(&rec)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
