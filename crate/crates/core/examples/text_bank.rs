//! Builds a text bank with background phrases and definition-style auxiliary text.
//!
//! cargo run --example text_bank

use ovseg::text::templates::imagenet_templates;
use ovseg::text::{
    attach_background, AuxCache, AuxKind, AuxSource, ClassEntry, HashingTextEncoder, TextBank, Vocabulary,
};

const CACHE: &str = r#"
[cat]
definition = "a small domesticated carnivorous mammal with soft fur"
[person]
definition = "a human being"
[sky]
definition = "the region of the atmosphere seen from the earth"
[wall]
definition = "a continuous vertical structure that encloses an area"
[background]
definition = "the area behind the main objects in a scene"
"#;

fn main() -> ovseg::Result<()> {
    let classes = vec![
        ClassEntry::new(0, "background"),
        ClassEntry::new(1, "cat"),
        ClassEntry::new(2, "person").with_subclasses(&["person", "person in shirt"]),
    ];
    let vocab = Vocabulary::new("demo", classes, Some(0))?;
    let vocab = attach_background(&vocab, &["sky".to_string(), "wall".to_string()])?;

    let encoder = HashingTextEncoder::new(64, 0);
    let mut cache = AuxCache::parse(CACHE)?;
    let bank = TextBank::build(
        &vocab,
        &imagenet_templates(),
        &encoder,
        Some(AuxSource {
            kind: AuxKind::Definition,
            cache: &mut cache,
            client: None,
        }),
        0.15,
    )?;

    println!(
        "{} rows for {} classes, dim {}",
        bank.num_rows(),
        bank.num_classes(),
        bank.dim()
    );
    for (i, row) in bank.rows.iter().enumerate() {
        let base = bank.base_embeddings.row(i);
        let refined = bank.refined_embeddings.row(i);
        println!(
            "{:<18} -> {:<10} |refined| {:.4}  cos(base, refined) {:.4}",
            row.phrase,
            bank.class_names[bank.group_map[i]],
            refined.dot(&refined).sqrt(),
            base.dot(&refined)
        );
    }
    Ok(())
}
