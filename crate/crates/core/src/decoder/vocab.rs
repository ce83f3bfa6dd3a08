//! Manipulation vocabulary, label sequences and the SOS/EOS tokenizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered list of manipulation labels, e.g. `eye → nose → lip`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequence(pub Vec<String>);

impl LabelSequence {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Self {
        Self(labels.into_iter().map(Into::into).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    /// Key used to group sequences by type; `original` for the empty one.
    pub fn type_key(&self) -> String {
        if self.0.is_empty() {
            "original".to_string()
        } else {
            self.0.join("-")
        }
    }
}

impl std::fmt::Display for LabelSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.type_key())
    }
}

const RESERVED: [&str; 4] = ["<eos>", "<sos>", "<pad>", "<nm>"];

/// Token ids: labels take `0..L` in manifest order, then EOS, SOS, PAD and
/// NM ("no manipulation") follow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    labels: Vec<String>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Vocabulary::new(labels)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.labels
    }
}

impl Vocabulary {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::Config("vocabulary needs at least one label".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || RESERVED.contains(&l.as_str()) {
                return Err(Error::Config(format!("label {l:?} is reserved or empty")));
            }
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    /// Total token count including control tokens.
    pub fn size(&self) -> usize {
        self.labels.len() + 4
    }

    pub fn eos(&self) -> usize {
        self.labels.len()
    }

    pub fn sos(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.labels.len() + 2
    }

    pub fn nm(&self) -> usize {
        self.labels.len() + 3
    }

    pub fn is_label(&self, id: usize) -> bool {
        id < self.labels.len()
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Vocabulary(label.to_string()))
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn token_name(&self, id: usize) -> &str {
        match self.label(id) {
            Some(l) => l,
            None => RESERVED.get(id - self.labels.len()).copied().unwrap_or("<?>"),
        }
    }

    /// `[SOS, labels…, EOS]` padded with PAD to `max_len + 2`.
    pub fn tokenize(&self, seq: &LabelSequence, max_len: usize) -> Result<TokenSequence> {
        if seq.len() > max_len {
            return Err(Error::Contract(format!(
                "sequence of {} manipulations exceeds the maximum of {max_len}",
                seq.len()
            )));
        }
        let mut ids = Vec::with_capacity(max_len + 2);
        ids.push(self.sos());
        for label in seq.iter() {
            ids.push(self.id(label)?);
        }
        ids.push(self.eos());
        let real = ids.len();
        ids.resize(max_len + 2, self.pad());
        let mask = (0..ids.len()).map(|i| i < real).collect();
        Ok(TokenSequence { ids, mask })
    }

    pub fn detokenize(&self, tokens: &TokenSequence) -> Result<LabelSequence> {
        tokens.validate(self)?;
        let labels = tokens.ids[1..]
            .iter()
            .take_while(|&&id| id != self.eos())
            .map(|&id| self.labels[id].clone())
            .collect();
        Ok(LabelSequence(labels))
    }
}

/// Tokenized sequence; `mask[i]` is false at PAD positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.ids.first() != Some(&vocab.sos()) {
            return Err(Error::Contract("token sequence must start with SOS".into()));
        }
        let eos: Vec<usize> = (0..self.ids.len()).filter(|&i| self.ids[i] == vocab.eos()).collect();
        let [eos_at] = eos[..] else {
            return Err(Error::Contract(format!("expected exactly one EOS, found {}", eos.len())));
        };
        if self.ids[1..eos_at].iter().any(|&id| !vocab.is_label(id)) {
            return Err(Error::Contract("control token inside the label span".into()));
        }
        if self.ids[eos_at + 1..].iter().any(|&id| id != vocab.pad()) {
            return Err(Error::Contract("non-PAD token after EOS".into()));
        }
        Ok(())
    }

    /// Decoder input: every position but the last.
    pub fn inputs(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Next-token targets for each input position; `None` where the target
    /// is PAD.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.ids[1..]
            .iter()
            .zip(&self.mask[1..])
            .map(|(&id, &real)| real.then_some(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["eyeglasses", "smiling", "beard", "bangs", "young"]).unwrap()
    }

    #[test]
    fn empty_sequence_is_sos_eos_then_pads() {
        let v = vocab();
        let t = v.tokenize(&LabelSequence::default(), 5).unwrap();
        let mut expected = vec![v.sos(), v.eos()];
        expected.extend([v.pad(); 5]);
        assert_eq!(t.ids, expected);
        assert_eq!(t.mask, [true, true, false, false, false, false, false]);
    }

    #[test]
    fn three_step_sequence() {
        let v = vocab();
        let seq = LabelSequence::new(["eyeglasses", "smiling", "beard"]);
        let t = v.tokenize(&seq, 5).unwrap();
        let names: Vec<_> = t.ids.iter().map(|&i| v.token_name(i)).collect();
        assert_eq!(names, ["<sos>", "eyeglasses", "smiling", "beard", "<eos>", "<pad>", "<pad>"]);
        assert_eq!(t.targets(), vec![Some(0), Some(1), Some(2), Some(v.eos()), None, None]);
    }

    #[test]
    fn unknown_and_overlong_are_rejected() {
        let v = vocab();
        assert!(matches!(
            v.tokenize(&LabelSequence::new(["nose"]), 5),
            Err(Error::Vocabulary(_))
        ));
        let long = LabelSequence::new(["bangs"; 6]);
        assert!(matches!(v.tokenize(&long, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn reserved_and_duplicate_labels_are_rejected() {
        assert!(Vocabulary::new(["a", "a"]).is_err());
        assert!(Vocabulary::new(["<eos>"]).is_err());
        assert!(Vocabulary::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn detokenize_inverts_tokenize_on_random_sequences() {
        let v = vocab();
        let mut r = crate::rng::seeded(99);
        for _ in 0..1000 {
            let n = r.gen_range(0..=5);
            let seq = LabelSequence::new((0..n).map(|_| v.labels()[r.gen_range(0..5)].clone()));
            assert_eq!(v.detokenize(&v.tokenize(&seq, 5).unwrap()).unwrap(), seq);
        }
    }

    #[test]
    fn validate_catches_malformed_sequences() {
        let v = vocab();
        let bad = TokenSequence {
            ids: vec![v.sos(), 0, v.eos(), 1],
            mask: vec![true; 4],
        };
        assert!(bad.validate(&v).is_err());
        let no_eos = TokenSequence {
            ids: vec![v.sos(), 0],
            mask: vec![true; 2],
        };
        assert!(no_eos.validate(&v).is_err());
    }

    #[test]
    fn vocabulary_serializes_as_label_list() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["eyeglasses","smiling","beard","bangs","young"]"#);
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","a"]"#).is_err());
    }
}
