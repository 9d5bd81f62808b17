//! Deterministic generation of the bundled desk-scale fixtures: the
//! 20-task cobsat-mini file and its matching toy-model specs.
//!
//! The same seed always produces byte-identical files; the copies checked
//! into `fixtures/` come from [`DEFAULT_FIXTURE_SEED`].

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const DEFAULT_FIXTURE_SEED: u64 = 7;

pub const TASK_COUNT: usize = 20;

pub const OBJECTS: [&str; 5] = ["apple", "hat", "cup", "book", "leaf"];
pub const ATTRIBUTES: [&str; 5] = ["red", "green", "purple", "wooden", "glass"];

/// The toy model's built-in attribute prior; heavily skewed toward "red" so
/// plain decoding parrots the prior instead of following the query.
const PRIOR_LINES: &str = "red = 0.85\ngreen = 0.09\npurple = 0.03\nwooden = 0.02\nglass = 0.01";

/// Builds the 20-task file: each task shows one object under two context
/// attributes and asks for a third via the query. Queries cycle through the
/// attribute list so every attribute appears as a target.
///
/// Pair texts carry only the attribute word; the object identity rides in
/// the image reference, the way the mirrored protocol names colors in text
/// while the object is visible only in the pictures. Keyword-derived
/// context sets therefore contain attributes but no objects.
pub fn generate_cobsat_mini(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("# cobsat-mini: 20 synthetic 2-shot tasks\n");
    for i in 0..TASK_COUNT {
        let query = ATTRIBUTES[i % ATTRIBUTES.len()];
        let object = OBJECTS[rng.gen_range(0..OBJECTS.len())];
        let mut others: Vec<&str> = ATTRIBUTES.iter().copied().filter(|a| *a != query).collect();
        others.shuffle(&mut rng);
        let ctx = &others[..2];
        let pairs = ctx
            .iter()
            .map(|attr| format!("img/{object}-{attr}|{attr}"))
            .collect::<Vec<_>>()
            .join(";;");
        out.push_str(&format!(
            "id=cm-{i:02}\tshot=2\tpairs={pairs}\tquery={query}\ttruth_object={object}\t\
             truth_attribute={query}\tobject_lexicon={}\tattribute_lexicon={}\n",
            OBJECTS.join(" "),
            ATTRIBUTES.join(" "),
        ));
    }
    out
}

/// Builds the toy-model spec matching the cobsat-mini tasks. Step one emits
/// an attribute (query-mixed against the prior), step two the context
/// object, step three the end marker.
pub fn generate_table_lm(compliance_gain: f64) -> String {
    let mut out = String::new();
    out.push_str("# toy model for the cobsat-mini tasks\n");
    out.push_str("[VOCAB]\n");
    out.push_str(&format!(
        "tokens = {} {} <eos>\n",
        OBJECTS.join(" "),
        ATTRIBUTES.join(" ")
    ));
    out.push_str("eos = <eos>\n");
    out.push_str("[PRIOR]\n");
    out.push_str(PRIOR_LINES);
    out.push('\n');
    out.push_str("[PARAMS]\n");
    out.push_str("prior_bias = 0.7\n");
    out.push_str(&format!("compliance_gain = {compliance_gain}\n"));
    out.push_str("[RULES]\n");
    out.push_str("rule = query=yes last=<s> => mix(@query)\n");
    out.push_str("rule = last=<s> => @prior\n");
    for object in OBJECTS {
        out.push_str(&format!("rule = last={object} => <eos>:1\n"));
    }
    // The object is recognized from the rendered image reference word.
    for object in OBJECTS {
        for attr in ATTRIBUTES {
            out.push_str(&format!(
                "rule = has=[img:img/{object}-{attr}] => {object}:1\n"
            ));
        }
    }
    out
}

/// File names produced by [`write_fixtures`].
pub const TASKS_FILE: &str = "cobsat-mini.tasks";
pub const TABLE_LM_FILE: &str = "apple-task.tablelm";
pub const TABLE_LM_HINT_FILE: &str = "apple-task-hint.tablelm";

/// Writes the task file plus two model specs (hint-insensitive and
/// hint-sensitive) into `out_dir`. Returns the paths written.
pub fn write_fixtures(seed: u64, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let entries = [
        (TASKS_FILE, generate_cobsat_mini(seed)),
        (TABLE_LM_FILE, generate_table_lm(0.0)),
        (TABLE_LM_HINT_FILE, generate_table_lm(1.0)),
    ];
    let mut written = Vec::new();
    for (name, content) in entries {
        let path = out_dir.join(name);
        std::fs::write(&path, content)?;
        written.push(path);
    }
    Ok(written)
}
