//! Incremental class schedules and the step views of a dataset.
//!
//! Class id 0 is the background. Within the network, the channel order at step
//! `t` is: background, then the classes of step 0, step 1, ... step `t`, each
//! step sorted by id. Old classes therefore always occupy a prefix of the
//! channel axis and the classes of the current step its tail.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};

pub type ClassId = u8;

pub const BACKGROUND: ClassId = 0;
pub const DEFAULT_IGNORE: ClassId = 255;

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "table",
    "dog",
    "horse",
    "motorbike",
    "person",
    "plant",
    "sheep",
    "sofa",
    "train",
    "tv-monitor",
];

pub const COCO_BASE_CLASSES: [&str; 60] = [
    "truck",
    "traffic light",
    "fire hydrant",
    "stop sign",
    "parking meter",
    "bench",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "bed",
    "toilet",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

pub const COCO_VOC_CLASSES: [&str; 20] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "boat",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "bottle",
    "chair",
    "couch",
    "potted plant",
    "dining table",
    "tv",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[serde(rename = "voc-15-5")]
    Voc15_5,
    #[serde(rename = "voc-10-10")]
    Voc10_10,
    CocoToVoc,
    Custom,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voc-15-5" => Ok(Preset::Voc15_5),
            "voc-10-10" => Ok(Preset::Voc10_10),
            "coco-to-voc" => Ok(Preset::CocoToVoc),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!("unknown schedule preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Voc15_5 => "voc-15-5",
            Preset::Voc10_10 => "voc-10-10",
            Preset::CocoToVoc => "coco-to-voc",
            Preset::Custom => "custom",
        })
    }
}

/// How a step's training images are selected from the full dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Images whose classes are all seen so far and include a current class.
    Disjoint,
    /// Every image with at least one pixel of a current class.
    Overlap,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Protocol::Disjoint),
            "overlap" => Ok(Protocol::Overlap),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Disjoint => "disjoint",
            Protocol::Overlap => "overlap",
        })
    }
}

/// Which classes an incremental step annotates at image level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeakUniverse {
    /// Only the classes introduced at the step.
    #[default]
    NewClasses,
    /// Every non-background class seen so far.
    AllSeen,
}

/// Ordered learning steps over pairwise-disjoint class sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncrementalSchedule {
    steps: Vec<Vec<ClassId>>,
    background: ClassId,
    ignore: ClassId,
    names: BTreeMap<ClassId, String>,
    base_excludes_future: bool,
}

impl IncrementalSchedule {
    /// Builds and validates a schedule. Each step is sorted; names default to
    /// `class-<id>` when missing.
    pub fn new(steps: Vec<Vec<ClassId>>, names: BTreeMap<ClassId, String>) -> Result<Self> {
        Self::with_options(steps, names, DEFAULT_IGNORE, false)
    }

    pub fn with_options(
        mut steps: Vec<Vec<ClassId>>,
        mut names: BTreeMap<ClassId, String>,
        ignore: ClassId,
        base_excludes_future: bool,
    ) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("a schedule needs at least one step".into()));
        }
        if ignore == BACKGROUND {
            return Err(Error::Config("ignore id must differ from background".into()));
        }
        let mut owner: BTreeMap<ClassId, usize> = BTreeMap::new();
        for (t, step) in steps.iter_mut().enumerate() {
            step.sort_unstable();
            for &c in step.iter() {
                if c == BACKGROUND || c == ignore {
                    return Err(Error::Config(format!(
                        "step {t} contains reserved id {c} (background or ignore)"
                    )));
                }
                if let Some(&first) = owner.get(&c) {
                    return Err(Error::ScheduleConflict {
                        class: c as u32,
                        first,
                        second: t,
                    });
                }
                owner.insert(c, t);
            }
            if step.is_empty() {
                return Err(Error::Config(format!("step {t} is empty")));
            }
            if t >= 1 && step.len() == 1 {
                return Err(Error::UnsupportedSingleClass(format!("step {t}")));
            }
        }
        names.entry(BACKGROUND).or_insert_with(|| "background".to_string());
        for &c in owner.keys() {
            names.entry(c).or_insert_with(|| format!("class-{c}"));
        }
        names.retain(|c, _| *c == BACKGROUND || owner.contains_key(c));
        Ok(Self {
            steps,
            background: BACKGROUND,
            ignore,
            names,
            base_excludes_future,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn background(&self) -> ClassId {
        self.background
    }

    pub fn ignore(&self) -> ClassId {
        self.ignore
    }

    /// Whether step-0 views drop every image showing a class of a later step.
    pub fn base_excludes_future(&self) -> bool {
        self.base_excludes_future
    }

    pub fn steps(&self) -> &[Vec<ClassId>] {
        &self.steps
    }

    pub fn name(&self, class: ClassId) -> &str {
        self.names.get(&class).map(String::as_str).unwrap_or("?")
    }

    pub fn names(&self) -> &BTreeMap<ClassId, String> {
        &self.names
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps.len() {
            return Err(Error::StepOutOfRange {
                index: t,
                len: self.steps.len(),
            });
        }
        Ok(())
    }

    /// Classes introduced at step `t`.
    pub fn new_classes(&self, t: usize) -> Result<&[ClassId]> {
        self.check_step(t)?;
        Ok(&self.steps[t])
    }

    /// Label set after step `t`, in channel order (background first).
    pub fn seen_classes(&self, t: usize) -> Result<Vec<ClassId>> {
        self.check_step(t)?;
        let mut out = vec![self.background];
        for step in &self.steps[..=t] {
            out.extend_from_slice(step);
        }
        Ok(out)
    }

    /// Label set before step `t`; empty for `t = 0`.
    pub fn old_classes(&self, t: usize) -> Result<Vec<ClassId>> {
        self.check_step(t)?;
        if t == 0 {
            return Ok(Vec::new());
        }
        self.seen_classes(t - 1)
    }

    /// Classes of steps after `t`.
    pub fn future_classes(&self, t: usize) -> Result<BTreeSet<ClassId>> {
        self.check_step(t)?;
        Ok(self.steps[t + 1..].iter().flatten().copied().collect())
    }

    /// Channel index of `class` at step `t`.
    pub fn channel_of(&self, class: ClassId, t: usize) -> Result<Option<usize>> {
        Ok(self.seen_classes(t)?.iter().position(|&c| c == class))
    }

    /// Plain-text export, readable back with [`IncrementalSchedule::from_text`].
    pub fn to_text(&self) -> String {
        let doc = ScheduleDoc {
            background: self.background,
            ignore: self.ignore,
            base_excludes_future: self.base_excludes_future,
            classes: self.names.iter().map(|(id, n)| (n.clone(), *id)).collect(),
            steps: self
                .steps
                .iter()
                .map(|s| s.iter().map(|c| self.name(*c).to_string()).collect())
                .collect(),
        };
        toml::to_string(&doc).expect("schedule document serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: ScheduleDoc =
            toml::from_str(text).map_err(|e| Error::format("schedule document", e.to_string()))?;
        if doc.background != BACKGROUND {
            return Err(Error::format("schedule document", "background id must be 0"));
        }
        let mut names = BTreeMap::new();
        for (name, id) in &doc.classes {
            if names.insert(*id, name.clone()).is_some() {
                return Err(Error::format(
                    "schedule document",
                    format!("class id {id} is named twice"),
                ));
            }
        }
        let steps = doc
            .steps
            .iter()
            .map(|step| {
                step.iter()
                    .map(|n| {
                        doc.classes.get(n).copied().ok_or_else(|| {
                            Error::format("schedule document", format!("unknown class name `{n}`"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_options(steps, names, doc.ignore, doc.base_excludes_future)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleDoc {
    background: ClassId,
    ignore: ClassId,
    #[serde(default)]
    base_excludes_future: bool,
    steps: Vec<Vec<String>>,
    classes: BTreeMap<String, ClassId>,
}

fn named(list: &[&str], first_id: ClassId) -> BTreeMap<ClassId, String> {
    list.iter()
        .enumerate()
        .map(|(i, n)| (first_id + i as ClassId, n.to_string()))
        .collect()
}

/// Builds a preset schedule, or validates `custom_steps` when `preset` is
/// [`Preset::Custom`].
pub fn build_schedule(preset: Preset, custom_steps: Option<Vec<Vec<ClassId>>>) -> Result<IncrementalSchedule> {
    match (preset, custom_steps) {
        (Preset::Custom, Some(steps)) => IncrementalSchedule::new(steps, BTreeMap::new()),
        (Preset::Custom, None) => Err(Error::Config("custom preset requires explicit steps".into())),
        (_, Some(_)) => Err(Error::Config(format!("preset {preset} does not take custom steps"))),
        (Preset::Voc15_5, None) => {
            IncrementalSchedule::new(vec![(1..=15).collect(), (16..=20).collect()], named(&VOC_CLASSES, 1))
        }
        (Preset::Voc10_10, None) => {
            IncrementalSchedule::new(vec![(1..=10).collect(), (11..=20).collect()], named(&VOC_CLASSES, 1))
        }
        (Preset::CocoToVoc, None) => {
            let mut names = named(&COCO_BASE_CLASSES, 1);
            names.extend(named(&COCO_VOC_CLASSES, 61));
            IncrementalSchedule::with_options(
                vec![(1..=60).collect(), (61..=80).collect()],
                names,
                DEFAULT_IGNORE,
                true,
            )
        }
    }
}

/// One dataset item with its supervision payload.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: RgbImage,
    /// Dense training supervision (step 0 only).
    pub dense_mask: Option<Mask>,
    /// Image-level training supervision (steps after the first).
    pub weak_labels: Option<BTreeSet<ClassId>>,
    /// Ground truth kept for evaluation; never used as training signal at
    /// incremental steps.
    pub eval_mask: Option<Mask>,
}

impl SampleRecord {
    pub fn dense(image: RgbImage, mask: Mask) -> Self {
        Self {
            image,
            eval_mask: Some(mask.clone()),
            dense_mask: Some(mask),
            weak_labels: None,
        }
    }

    pub fn weak(image: RgbImage, labels: BTreeSet<ClassId>) -> Self {
        Self {
            image,
            dense_mask: None,
            weak_labels: Some(labels),
            eval_mask: None,
        }
    }
}

/// Non-background, non-ignore classes present in `mask`, restricted to `universe`.
pub fn derive_weak_labels(mask: &Mask, universe: &BTreeSet<ClassId>, ignore: ClassId) -> BTreeSet<ClassId> {
    mask_classes(mask, ignore)
        .into_iter()
        .filter(|c| universe.contains(c))
        .collect()
}

fn mask_classes(mask: &Mask, ignore: ClassId) -> BTreeSet<ClassId> {
    let mut seen = [false; 256];
    for &v in mask.data() {
        seen[v as usize] = true;
    }
    (0..=255u8)
        .filter(|&c| seen[c as usize] && c != BACKGROUND && c != ignore)
        .collect()
}

/// Relabels every class outside `keep` (other than ignore) as background.
pub fn remap_unseen(mask: &Mask, keep: &BTreeSet<ClassId>, ignore: ClassId) -> Mask {
    let mut lut = [BACKGROUND; 256];
    for &c in keep {
        lut[c as usize] = c;
    }
    lut[ignore as usize] = ignore;
    mask.map(|v| lut[v as usize])
}

/// Step view of a densely annotated dataset with weak labels over the classes
/// introduced at `t`.
pub fn filter_step(
    dataset: &[SampleRecord],
    schedule: &IncrementalSchedule,
    t: usize,
    protocol: Protocol,
) -> Result<Vec<SampleRecord>> {
    filter_step_with_universe(dataset, schedule, t, protocol, WeakUniverse::NewClasses)
}

pub fn filter_step_with_universe(
    dataset: &[SampleRecord],
    schedule: &IncrementalSchedule,
    t: usize,
    protocol: Protocol,
    universe: WeakUniverse,
) -> Result<Vec<SampleRecord>> {
    let current: BTreeSet<ClassId> = schedule.new_classes(t)?.iter().copied().collect();
    let seen: BTreeSet<ClassId> = schedule.seen_classes(t)?.into_iter().collect();
    let future = schedule.future_classes(t)?;
    let weak_universe: BTreeSet<ClassId> = match universe {
        WeakUniverse::NewClasses => current.clone(),
        WeakUniverse::AllSeen => seen.iter().copied().filter(|&c| c != BACKGROUND).collect(),
    };
    let ignore = schedule.ignore();

    let mut out = Vec::new();
    for (i, record) in dataset.iter().enumerate() {
        let mask = record
            .dense_mask
            .as_ref()
            .or(record.eval_mask.as_ref())
            .ok_or_else(|| Error::Supervision(format!("record {i} has no dense mask to filter on")))?;
        let present = mask_classes(mask, ignore);
        if present.is_disjoint(&current) {
            continue;
        }
        let keep = match protocol {
            Protocol::Disjoint => present.is_subset(&seen),
            Protocol::Overlap => true,
        } && !(t == 0 && schedule.base_excludes_future() && !present.is_disjoint(&future));
        if !keep {
            continue;
        }
        let visible = remap_unseen(mask, &seen, ignore);
        out.push(if t == 0 {
            SampleRecord {
                image: record.image.clone(),
                dense_mask: Some(visible.clone()),
                weak_labels: None,
                eval_mask: Some(visible),
            }
        } else {
            SampleRecord {
                image: record.image.clone(),
                dense_mask: None,
                weak_labels: Some(derive_weak_labels(mask, &weak_universe, ignore)),
                eval_mask: Some(visible),
            }
        });
    }
    Ok(out)
}
