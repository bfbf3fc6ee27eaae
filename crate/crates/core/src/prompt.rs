//! Prompt rendering over the variation grid.
//!
//! A prompt is determined by an example and a [`PromptAxes`] point: which
//! instruction paraphrase, which target description, which order the three
//! label words appear in, which wrapper style the backend expects, and
//! whether the two-hop (relation, then stance) chain is used. Template text
//! lives in `templates/default.toml` and can be replaced at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::StanceExample;
use crate::label::StanceLabel;

const DEFAULT_TEMPLATES: &str = include_str!("../templates/default.toml");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("relation answer from hop 1 is empty")]
    EmptyRelationAnswer,
    #[error("grid axis {0:?} has no values")]
    EmptyAxis(&'static str),
    #[error("template {name:?} lacks placeholder {{{placeholder}}}")]
    MissingPlaceholder { name: String, placeholder: &'static str },
    #[error("template file: {0}")]
    TemplateFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstructionVariant {
    A,
    B,
    C,
}

impl InstructionVariant {
    pub const ALL: [InstructionVariant; 3] = [InstructionVariant::A, InstructionVariant::B, InstructionVariant::C];
}

/// Replacement target description. `reversed` marks a phrasing whose
/// Favor/Against polarity is the inverse of the original target.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TargetOverride {
    pub phrase: String,
    #[serde(default)]
    pub reversed: bool,
}

/// A permutation of the three labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct LabelOrder([StanceLabel; 3]);

impl LabelOrder {
    /// Favor, Against, None.
    pub const A: LabelOrder = LabelOrder([StanceLabel::Favor, StanceLabel::Against, StanceLabel::None]);
    /// Against, Favor, None.
    pub const B: LabelOrder = LabelOrder([StanceLabel::Against, StanceLabel::Favor, StanceLabel::None]);
    /// None, Favor, Against.
    pub const C: LabelOrder = LabelOrder([StanceLabel::None, StanceLabel::Favor, StanceLabel::Against]);

    pub fn new(order: [StanceLabel; 3]) -> Result<Self, PromptError> {
        let mut seen = [false; 3];
        for l in order {
            if std::mem::replace(&mut seen[l.index()], true) {
                return Err(PromptError::PreconditionViolated(format!(
                    "label order {order:?} repeats {l}"
                )));
            }
        }
        Ok(LabelOrder(order))
    }

    pub fn labels(&self) -> [StanceLabel; 3] {
        self.0
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "A" | "a" => Some(Self::A),
            "B" | "b" => Some(Self::B),
            "C" | "c" => Some(Self::C),
            _ => None,
        }
    }

    /// `"Favor", "Against", or "None"` in this order.
    pub fn render_list(&self) -> String {
        let [a, b, c] = self.0;
        format!("\"{a}\", \"{b}\", or \"{c}\"")
    }
}

impl Default for LabelOrder {
    fn default() -> Self {
        Self::A
    }
}

impl fmt::Display for LabelOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{a}/{b}/{c}")
    }
}

impl<'de> Deserialize<'de> for LabelOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Preset(String),
            List([StanceLabel; 3]),
        }
        match Raw::deserialize(d)? {
            Raw::Preset(name) => LabelOrder::preset(&name)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown label arrangement {name:?}"))),
            Raw::List(list) => LabelOrder::new(list).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Alpaca-like instruction/input/response block.
    InstructBlock,
    /// Raw continuation ending in `Stance:`.
    Completion,
    /// Chat messages.
    Chat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopMode {
    Single,
    TwoHop,
}

/// One point in the prompt variation grid.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PromptAxes {
    pub instruction: InstructionVariant,
    #[serde(default)]
    pub target_override: Option<TargetOverride>,
    #[serde(default)]
    pub label_order: LabelOrder,
    pub style: PromptStyle,
    pub hop_mode: HopMode,
}

impl Default for PromptAxes {
    fn default() -> Self {
        PromptAxes {
            instruction: InstructionVariant::A,
            target_override: None,
            label_order: LabelOrder::A,
            style: PromptStyle::Completion,
            hop_mode: HopMode::Single,
        }
    }
}

impl PromptAxes {
    pub fn reversed(&self) -> bool {
        self.target_override.as_ref().is_some_and(|o| o.reversed)
    }

    /// Stable hex digest of the canonical serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("axes serialize");
        hex::encode(Sha256::digest(&json))
    }

    /// The target phrase actually shown to the model.
    pub fn effective_target<'a>(&'a self, example: &'a StanceExample) -> &'a str {
        match &self.target_override {
            Some(o) => &o.phrase,
            None => &example.target,
        }
    }

    /// Human-readable value of one axis, used in reports.
    pub fn axis_value(&self, axis: Axis) -> String {
        match axis {
            Axis::Instruction => format!("{:?}", self.instruction),
            Axis::Target => match &self.target_override {
                None => "original".to_string(),
                Some(o) if o.reversed => format!("{} (reversed)", o.phrase),
                Some(o) => o.phrase.clone(),
            },
            Axis::LabelOrder => self.label_order.to_string(),
            Axis::Style => format!("{:?}", self.style),
            Axis::HopMode => format!("{:?}", self.hop_mode),
        }
    }
}

/// The five variation dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Instruction,
    Target,
    LabelOrder,
    Style,
    HopMode,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Instruction, Axis::Target, Axis::LabelOrder, Axis::Style, Axis::HopMode];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Instruction => "instruction",
            Axis::Target => "target",
            Axis::LabelOrder => "label_order",
            Axis::Style => "style",
            Axis::HopMode => "hop_mode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub segments: Vec<Segment>,
    pub axes: PromptAxes,
    /// 1 for single-hop prompts and the relation hop, 2 for the stance hop.
    pub hop_index: u8,
}

impl RenderedPrompt {
    /// Flattened text for completion-style endpoints.
    pub fn to_plain_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    /// (role, content) pairs for chat endpoints; plain segments become user turns.
    pub fn to_messages(&self) -> Vec<(&'static str, &str)> {
        self.segments
            .iter()
            .map(|s| {
                let role = match s.role {
                    Role::System => "system",
                    Role::Assistant => "assistant",
                    Role::User | Role::Plain => "user",
                };
                (role, s.text.as_str())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleTemplates {
    #[serde(default)]
    pub preamble: String,
    pub single: String,
    pub relation: String,
    pub stance: String,
}

/// All template strings used for rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    pub instructions: BTreeMap<InstructionVariant, String>,
    pub relation: String,
    pub completion: StyleTemplates,
    pub instruct_block: StyleTemplates,
    pub chat: StyleTemplates,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::from_toml(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}

impl TemplateSet {
    pub fn from_toml(s: &str) -> Result<Self, PromptError> {
        let set: TemplateSet = toml::from_str(s).map_err(|e| PromptError::TemplateFile(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let s = std::fs::read_to_string(path).map_err(|e| PromptError::TemplateFile(e.to_string()))?;
        Self::from_toml(&s)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let need = |name: &str, text: &str, placeholder: &'static str| {
            if text.contains(&format!("{{{placeholder}}}")) {
                Ok(())
            } else {
                Err(PromptError::MissingPlaceholder { name: name.to_string(), placeholder })
            }
        };
        for v in InstructionVariant::ALL {
            let text = self
                .instructions
                .get(&v)
                .ok_or_else(|| PromptError::TemplateFile(format!("instruction {v:?} missing")))?;
            need(&format!("instructions.{v:?}"), text, "target")?;
            need(&format!("instructions.{v:?}"), text, "labels")?;
        }
        need("relation", &self.relation, "target")?;
        for (name, style) in [("completion", &self.completion), ("instruct_block", &self.instruct_block), ("chat", &self.chat)] {
            need(&format!("{name}.single"), &style.single, "instruction")?;
            need(&format!("{name}.relation"), &style.relation, "relation")?;
            need(&format!("{name}.stance"), &style.stance, "instruction")?;
        }
        // Completion and block styles inline the hop-1 answer; chat replays it as a turn.
        need("completion.stance", &self.completion.stance, "relation_answer")?;
        need("instruct_block.stance", &self.instruct_block.stance, "relation_answer")?;
        Ok(())
    }

    fn style(&self, style: PromptStyle) -> &StyleTemplates {
        match style {
            PromptStyle::Completion => &self.completion,
            PromptStyle::InstructBlock => &self.instruct_block,
            PromptStyle::Chat => &self.chat,
        }
    }

    fn instruction_line(&self, axes: &PromptAxes, target: &str) -> String {
        let labels = axes.label_order.render_list();
        fill(&self.instructions[&axes.instruction], &[("target", target), ("labels", &labels)])
    }

    fn relation_line(&self, target: &str) -> String {
        fill(&self.relation, &[("target", target)])
    }
}

/// Single-pass `{name}` substitution. Substituted values are never rescanned,
/// so braces inside tweets pass through untouched.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn checked_target<'a>(example: &'a StanceExample, axes: &'a PromptAxes) -> Result<&'a str, PromptError> {
    let target = axes.effective_target(example);
    if target.trim().is_empty() {
        return Err(PromptError::PreconditionViolated("target phrase is empty".into()));
    }
    Ok(target)
}

fn wrap(style: PromptStyle, text: String) -> Vec<Segment> {
    let role = match style {
        PromptStyle::Chat => Role::User,
        PromptStyle::Completion | PromptStyle::InstructBlock => Role::Plain,
    };
    vec![Segment { role, text }]
}

/// Renders the single-hop stance prompt.
pub fn render_single_hop(
    templates: &TemplateSet,
    example: &StanceExample,
    axes: &PromptAxes,
) -> Result<RenderedPrompt, PromptError> {
    if axes.hop_mode != HopMode::Single {
        return Err(PromptError::PreconditionViolated("single-hop render needs hop_mode=single".into()));
    }
    let target = checked_target(example, axes)?;
    let style = templates.style(axes.style);
    let instruction = templates.instruction_line(axes, target);
    let text = fill(
        &style.single,
        &[("preamble", &style.preamble), ("instruction", &instruction), ("tweet", &example.text)],
    );
    Ok(RenderedPrompt { segments: wrap(axes.style, text), axes: axes.clone(), hop_index: 1 })
}

/// Hop 1 of the two-hop chain: ask for the text-target relation, no labels.
pub fn render_relation_hop(
    templates: &TemplateSet,
    example: &StanceExample,
    axes: &PromptAxes,
) -> Result<RenderedPrompt, PromptError> {
    if axes.hop_mode != HopMode::TwoHop {
        return Err(PromptError::PreconditionViolated("relation hop needs hop_mode=two_hop".into()));
    }
    let target = checked_target(example, axes)?;
    let style = templates.style(axes.style);
    let relation = templates.relation_line(target);
    let text = fill(
        &style.relation,
        &[("preamble", &style.preamble), ("relation", &relation), ("tweet", &example.text)],
    );
    Ok(RenderedPrompt { segments: wrap(axes.style, text), axes: axes.clone(), hop_index: 1 })
}

/// Hop 2: the stance question conditioned on the hop-1 answer.
pub fn render_stance_hop(
    templates: &TemplateSet,
    example: &StanceExample,
    axes: &PromptAxes,
    relation_answer: &str,
) -> Result<RenderedPrompt, PromptError> {
    if axes.hop_mode != HopMode::TwoHop {
        return Err(PromptError::PreconditionViolated("stance hop needs hop_mode=two_hop".into()));
    }
    if relation_answer.trim().is_empty() {
        return Err(PromptError::EmptyRelationAnswer);
    }
    let target = checked_target(example, axes)?;
    let style = templates.style(axes.style);
    let instruction = templates.instruction_line(axes, target);
    let relation = templates.relation_line(target);
    let vars = [
        ("preamble", style.preamble.as_str()),
        ("instruction", instruction.as_str()),
        ("relation", relation.as_str()),
        ("tweet", example.text.as_str()),
        ("relation_answer", relation_answer),
    ];
    let segments = match axes.style {
        PromptStyle::Chat => vec![
            Segment { role: Role::User, text: fill(&style.relation, &vars) },
            Segment { role: Role::Assistant, text: relation_answer.to_string() },
            Segment { role: Role::User, text: fill(&style.stance, &vars) },
        ],
        PromptStyle::Completion | PromptStyle::InstructBlock => {
            vec![Segment { role: Role::Plain, text: fill(&style.stance, &vars) }]
        }
    };
    Ok(RenderedPrompt { segments, axes: axes.clone(), hop_index: 2 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Vary one axis at a time around the first value of every axis.
    #[default]
    OneAxis,
    /// Full Cartesian product.
    Product,
}

fn default_instructions() -> Vec<InstructionVariant> {
    vec![InstructionVariant::A]
}
fn default_orders() -> Vec<LabelOrder> {
    vec![LabelOrder::A]
}
fn default_styles() -> Vec<PromptStyle> {
    vec![PromptStyle::Completion]
}
fn default_hops() -> Vec<HopMode> {
    vec![HopMode::Single]
}
fn yes() -> bool {
    true
}

/// Allowed values per axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_instructions")]
    pub instructions: Vec<InstructionVariant>,
    /// Whether the example's own target is one of the target values.
    #[serde(default = "yes")]
    pub include_original_target: bool,
    #[serde(default)]
    pub target_overrides: Vec<TargetOverride>,
    #[serde(default = "default_orders")]
    pub label_orders: Vec<LabelOrder>,
    #[serde(default = "default_styles")]
    pub styles: Vec<PromptStyle>,
    #[serde(default = "default_hops")]
    pub hop_modes: Vec<HopMode>,
    #[serde(default)]
    pub mode: SweepMode,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            instructions: default_instructions(),
            include_original_target: true,
            target_overrides: Vec::new(),
            label_orders: default_orders(),
            styles: default_styles(),
            hop_modes: default_hops(),
            mode: SweepMode::OneAxis,
        }
    }
}

fn dedup<T: PartialEq + Clone>(values: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(values.len());
    for v in values {
        if !out.contains(v) {
            out.push(v.clone());
        }
    }
    out
}

struct AxisValues {
    instructions: Vec<InstructionVariant>,
    targets: Vec<Option<TargetOverride>>,
    orders: Vec<LabelOrder>,
    styles: Vec<PromptStyle>,
    hops: Vec<HopMode>,
}

impl GridConfig {
    fn values(&self) -> Result<AxisValues, PromptError> {
        let mut targets: Vec<Option<TargetOverride>> = Vec::new();
        if self.include_original_target {
            targets.push(None);
        }
        targets.extend(self.target_overrides.iter().cloned().map(Some));
        let v = AxisValues {
            instructions: dedup(&self.instructions),
            targets: dedup(&targets),
            orders: dedup(&self.label_orders),
            styles: dedup(&self.styles),
            hops: dedup(&self.hop_modes),
        };
        for (name, empty) in [
            ("instructions", v.instructions.is_empty()),
            ("targets", v.targets.is_empty()),
            ("label_orders", v.orders.is_empty()),
            ("styles", v.styles.is_empty()),
            ("hop_modes", v.hops.is_empty()),
        ] {
            if empty {
                return Err(PromptError::EmptyAxis(name));
            }
        }
        Ok(v)
    }

    /// Cells for this grid's sweep mode.
    pub fn cells(&self) -> Result<Vec<PromptAxes>, PromptError> {
        match self.mode {
            SweepMode::Product => enumerate_axes(self),
            SweepMode::OneAxis => sweep_one_axis(self),
        }
    }
}

/// Full Cartesian product, odometer order (instruction slowest, hop mode fastest).
pub fn enumerate_axes(grid: &GridConfig) -> Result<Vec<PromptAxes>, PromptError> {
    let v = grid.values()?;
    let mut out = Vec::with_capacity(
        v.instructions.len() * v.targets.len() * v.orders.len() * v.styles.len() * v.hops.len(),
    );
    for &instruction in &v.instructions {
        for target in &v.targets {
            for &label_order in &v.orders {
                for &style in &v.styles {
                    for &hop_mode in &v.hops {
                        out.push(PromptAxes {
                            instruction,
                            target_override: target.clone(),
                            label_order,
                            style,
                            hop_mode,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Baseline cell (first value of every axis) followed by each non-baseline
/// value of each axis with the others held at baseline.
pub fn sweep_one_axis(grid: &GridConfig) -> Result<Vec<PromptAxes>, PromptError> {
    let v = grid.values()?;
    let base = PromptAxes {
        instruction: v.instructions[0],
        target_override: v.targets[0].clone(),
        label_order: v.orders[0],
        style: v.styles[0],
        hop_mode: v.hops[0],
    };
    let mut out = vec![base.clone()];
    out.extend(v.instructions[1..].iter().map(|&instruction| PromptAxes { instruction, ..base.clone() }));
    out.extend(
        v.targets[1..]
            .iter()
            .map(|t| PromptAxes { target_override: t.clone(), ..base.clone() }),
    );
    out.extend(v.orders[1..].iter().map(|&label_order| PromptAxes { label_order, ..base.clone() }));
    out.extend(v.styles[1..].iter().map(|&style| PromptAxes { style, ..base.clone() }));
    out.extend(v.hops[1..].iter().map(|&hop_mode| PromptAxes { hop_mode, ..base.clone() }));
    Ok(out)
}
