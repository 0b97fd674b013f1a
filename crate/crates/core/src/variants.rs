//! Ablation variants: model switches plus input/output preprocessing.

use crate::parser::ModelConfig;
use crate::registry::Registry;

/// One column of the ablation table.
pub trait Variant {
    /// Column heading in reports.
    fn column(&self) -> &'static str;
    fn configure(&self, config: &mut ModelConfig);
    /// Whether utterances and trees go through gazetteer delexicalisation.
    fn delexicalizes(&self) -> bool {
        false
    }
}

/// Attention, no copy.
struct Baseline;

impl Variant for Baseline {
    fn column(&self) -> &'static str {
        "BL"
    }

    fn configure(&self, config: &mut ModelConfig) {
        config.attention = true;
        config.copy = false;
    }
}

struct NoAttention;

impl Variant for NoAttention {
    fn column(&self) -> &'static str {
        "-Att"
    }

    fn configure(&self, config: &mut ModelConfig) {
        config.attention = false;
        config.copy = false;
    }
}

struct Delex;

impl Variant for Delex {
    fn column(&self) -> &'static str {
        "+Delex"
    }

    fn configure(&self, config: &mut ModelConfig) {
        Baseline.configure(config);
    }

    fn delexicalizes(&self) -> bool {
        true
    }
}

struct Copy;

impl Variant for Copy {
    fn column(&self) -> &'static str {
        "+Copy"
    }

    fn configure(&self, config: &mut ModelConfig) {
        config.attention = true;
        config.copy = true;
    }
}

/// Table order.
pub const ABLATION_ORDER: [&str; 4] = ["bl", "no-att", "delex", "copy"];

pub fn variants() -> Registry<dyn Variant> {
    let mut r: Registry<dyn Variant> = Registry::new("variant");
    let entries: [(&str, Box<dyn Variant>); 4] = [
        ("bl", Box::new(Baseline)),
        ("no-att", Box::new(NoAttention)),
        ("delex", Box::new(Delex)),
        ("copy", Box::new(Copy)),
    ];
    for (name, v) in entries {
        r.register(name, v).expect("distinct names");
    }
    r
}
