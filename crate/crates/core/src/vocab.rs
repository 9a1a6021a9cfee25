use std::collections::HashMap;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Reserved ids, then content tokens `w00…`, then mode markers `<m3>…`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    content: usize,
    markers: usize,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(content: usize, markers: usize) -> Self {
        let mut v = Self {
            content,
            markers,
            index: HashMap::new(),
        };
        for id in 0..v.size() {
            let name = v.token(id);
            v.index.insert(name, id);
        }
        v
    }

    pub fn size(&self) -> usize {
        RESERVED + self.content + self.markers
    }

    pub fn content_size(&self) -> usize {
        self.content
    }

    pub fn content_ids(&self) -> std::ops::Range<usize> {
        RESERVED..RESERVED + self.content
    }

    /// Id of the marker appended by mode `m` (`m ≥ 3`).
    pub fn marker(&self, m: usize) -> Option<usize> {
        (m >= 3 && m - 3 < self.markers).then(|| RESERVED + self.content + m - 3)
    }

    pub fn token(&self, id: usize) -> String {
        if id < RESERVED {
            RESERVED_NAMES[id].to_string()
        } else if id < RESERVED + self.content {
            format!("w{:02}", id - RESERVED)
        } else if id < self.size() {
            format!("<m{}>", id - RESERVED - self.content + 3)
        } else {
            RESERVED_NAMES[UNK].to_string()
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Space-joined tokens, stopping before the first end-of-sequence.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}
