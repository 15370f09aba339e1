use ndarray::{Array1, Array2};

use super::aux::{generate_auxiliary_text, AuxCache, AuxKind, LlmClient};
use super::encoder::TextEncoder;
use super::templates::{fill, validate_templates};
use super::vocab::{BankRow, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, l2_normalize_rows};

/// Per-row text embeddings plus the row → class grouping used when merging scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub base_embeddings: Array2<f32>,
    pub aux_embeddings: Array2<f32>,
    pub refined_embeddings: Array2<f32>,
    /// Row index → class id.
    pub group_map: Vec<usize>,
    pub rows: Vec<BankRow>,
    pub class_names: Vec<String>,
    pub alpha: f32,
}

/// Where auxiliary texts come from while building a bank.
pub struct AuxSource<'a> {
    pub kind: AuxKind,
    pub cache: &'a mut AuxCache,
    pub client: Option<&'a dyn LlmClient>,
}

/// Template ensemble of each phrase: encode every filled template, normalise each
/// encoding, average, re-normalise.
pub fn ensemble_embeddings(phrases: &[String], templates: &[String], encoder: &dyn TextEncoder) -> Result<Array2<f32>> {
    validate_templates(templates)?;
    let sentences: Vec<String> = phrases
        .iter()
        .flat_map(|p| templates.iter().map(move |t| fill(t, p)))
        .collect();
    let mut encoded = encoder.embed_batch(&sentences)?;
    l2_normalize_rows(&mut encoded);
    let t = templates.len();
    let mut out = Array2::<f32>::zeros((phrases.len(), encoder.dim()));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let mut mean = Array1::<f32>::zeros(encoder.dim());
        for j in 0..t {
            mean += &encoded.row(i * t + j);
        }
        mean /= t as f32;
        l2_normalize(&mut mean);
        row.assign(&mean);
    }
    Ok(out)
}

/// Unit-norm embedding per bank row of `vocab` (class names, subclasses, background
/// phrases, in [`Vocabulary::rows`] order).
pub fn build_class_embeddings(
    vocab: &Vocabulary,
    templates: &[String],
    encoder: &dyn TextEncoder,
) -> Result<Array2<f32>> {
    let phrases: Vec<String> = vocab.rows().into_iter().map(|r| r.phrase).collect();
    ensemble_embeddings(&phrases, templates, encoder)
}

/// `alpha·aux + (1-alpha)·base`, re-normalised per row. The endpoints return the
/// corresponding input unchanged.
pub fn fuse_auxiliary(base: &Array2<f32>, aux: &Array2<f32>, alpha: f32) -> Result<Array2<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    if base.dim() != aux.dim() {
        return Err(Error::dim(format!(
            "base embeddings {:?} vs auxiliary embeddings {:?}",
            base.dim(),
            aux.dim()
        )));
    }
    if alpha == 0.0 {
        return Ok(base.clone());
    }
    if alpha == 1.0 {
        return Ok(aux.clone());
    }
    let mut fused = aux * alpha + base * (1.0 - alpha);
    l2_normalize_rows(&mut fused);
    Ok(fused)
}

impl TextBank {
    /// Builds base, auxiliary and refined embeddings for every bank row.
    ///
    /// Auxiliary texts are looked up by the row phrase first and by the owning class
    /// name second; generation (when a client is present) is keyed by the class name.
    /// Definitions are encoded verbatim, synonyms go through the template ensemble.
    /// With `alpha == 0` no auxiliary text is needed and `aux_embeddings` mirrors the base.
    pub fn build(
        vocab: &Vocabulary,
        templates: &[String],
        encoder: &dyn TextEncoder,
        aux: Option<AuxSource<'_>>,
        alpha: f32,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
        }
        let rows = vocab.rows();
        let base = build_class_embeddings(vocab, templates, encoder)?;
        let aux_embeddings = match aux {
            Some(source) if alpha > 0.0 => {
                let kind = source.kind;
                let texts = auxiliary_texts(vocab, &rows, source)?;
                match kind {
                    AuxKind::Definition => {
                        let mut e = encoder.embed_batch(&texts)?;
                        l2_normalize_rows(&mut e);
                        e
                    }
                    AuxKind::Synonym => ensemble_embeddings(&texts, templates, encoder)?,
                }
            }
            None if alpha > 0.0 => {
                return Err(Error::config(format!(
                    "alpha is {alpha} but no auxiliary text source was provided"
                )))
            }
            _ => base.clone(),
        };
        let refined = fuse_auxiliary(&base, &aux_embeddings, alpha)?;
        Ok(Self {
            base_embeddings: base,
            aux_embeddings,
            refined_embeddings: refined,
            group_map: rows.iter().map(|r| r.class_id).collect(),
            rows,
            class_names: vocab.class_names(),
            alpha,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.group_map.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.refined_embeddings.ncols()
    }
}

fn auxiliary_texts(vocab: &Vocabulary, rows: &[BankRow], source: AuxSource<'_>) -> Result<Vec<String>> {
    let AuxSource { kind, cache, client } = source;
    rows.iter()
        .map(|row| {
            if let Some(t) = cache.get(&row.phrase, kind) {
                return Ok(t.to_string());
            }
            let class_name = &vocab.classes[row.class_id].name;
            generate_auxiliary_text(class_name, kind, client, cache)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::encoder::HashingTextEncoder;
    use crate::text::vocab::ClassEntry;

    fn unit_rows(m: &Array2<f32>) -> bool {
        m.rows().into_iter().all(|r| (r.dot(&r).sqrt() - 1.0).abs() < 1e-5)
    }

    #[test]
    fn single_template_is_the_normalised_encoding() {
        let enc = HashingTextEncoder::new(16, 3);
        let t = vec!["a photo of a {}.".to_string()];
        let got = ensemble_embeddings(&["cat".into()], &t, &enc).unwrap();
        let mut want = enc.embed("a photo of a cat.").unwrap();
        l2_normalize(&mut want);
        for (a, b) in got.row(0).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(unit_rows(&got));
    }

    #[test]
    fn repeated_template_matches_single() {
        let enc = HashingTextEncoder::new(16, 3);
        let one = vec!["a photo of a {}.".to_string()];
        let three = vec![one[0].clone(), one[0].clone(), one[0].clone()];
        let a = ensemble_embeddings(&["dog".into()], &one, &enc).unwrap();
        let b = ensemble_embeddings(&["dog".into()], &three, &enc).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_templates_rejected() {
        let enc = HashingTextEncoder::new(4, 0);
        assert!(matches!(
            ensemble_embeddings(&["dog".into()], &[], &enc),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fusion_endpoints_and_range() {
        let enc = HashingTextEncoder::new(8, 0);
        let t = vec!["{}".to_string()];
        let base = ensemble_embeddings(&["cat".into(), "dog".into()], &t, &enc).unwrap();
        let aux = ensemble_embeddings(&["kitten".into(), "puppy".into()], &t, &enc).unwrap();
        assert_eq!(fuse_auxiliary(&base, &aux, 0.0).unwrap(), base);
        assert_eq!(fuse_auxiliary(&base, &aux, 1.0).unwrap(), aux);
        assert!(unit_rows(&fuse_auxiliary(&base, &aux, 0.3).unwrap()));
        assert!(matches!(fuse_auxiliary(&base, &aux, 1.5), Err(Error::Config(_))));
        assert!(matches!(fuse_auxiliary(&base, &aux, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn bank_uses_class_entry_when_phrase_missing() {
        let vocab = Vocabulary::new(
            "t",
            vec![
                ClassEntry::new(0, "person").with_subclasses(&["person in shirt"]),
                ClassEntry::new(1, "cat"),
            ],
            None,
        )
        .unwrap();
        let mut cache = AuxCache::default();
        cache.insert("person", AuxKind::Definition, "a human being", "m", false);
        cache.insert("cat", AuxKind::Definition, "a small furry animal", "m", false);
        let enc = HashingTextEncoder::new(8, 0);
        let bank = TextBank::build(
            &vocab,
            &["a photo of a {}.".to_string()],
            &enc,
            Some(AuxSource {
                kind: AuxKind::Definition,
                cache: &mut cache,
                client: None,
            }),
            0.2,
        )
        .unwrap();
        assert_eq!(bank.group_map, vec![0, 0, 1]);
        assert_eq!(bank.aux_embeddings.row(0), bank.aux_embeddings.row(1));
        assert!(unit_rows(&bank.refined_embeddings));
    }

    #[test]
    fn missing_aux_is_reported() {
        let vocab = Vocabulary::new("t", vec![ClassEntry::new(0, "cat")], None).unwrap();
        let mut cache = AuxCache::default();
        let enc = HashingTextEncoder::new(8, 0);
        let err = TextBank::build(
            &vocab,
            &["{}".to_string()],
            &enc,
            Some(AuxSource {
                kind: AuxKind::Synonym,
                cache: &mut cache,
                client: None,
            }),
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingAuxiliary { .. }));
    }
}
