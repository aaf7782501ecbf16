//! Symbol table and the optional subword refinement layer.
//!
//! At desk scale each label is a single symbol. A real tokenizer spells a
//! symbol as several tokens; [`TokenTrie`] turns an allowed symbol set into
//! allowed next tokens so the automaton stays tokenizer-agnostic.

use std::collections::BTreeMap;

use thiserror::Error;

use super::Symbol;
use crate::grammar::{ALIGN_CLOSE, ALIGN_OPEN, TRIPLE_OPEN};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};

pub type SymbolId = u32;

const MARKERS: [Symbol; 3] = [Symbol::AlignOpen, Symbol::AlignClose, Symbol::TripleOpen];

/// Dense numbering of all structural symbols of one graph: the three
/// markers, then entities, then relations.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    num_entities: u32,
    num_relations: u32,
}

impl Vocabulary {
    pub fn for_graph(g: &KnowledgeGraph) -> Self {
        Self {
            num_entities: g.num_entities() as u32,
            num_relations: g.num_relations() as u32,
        }
    }

    pub fn len(&self) -> usize {
        MARKERS.len() + self.num_entities as usize + self.num_relations as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, symbol: Symbol) -> SymbolId {
        let m = MARKERS.len() as u32;
        match symbol {
            Symbol::AlignOpen => 0,
            Symbol::AlignClose => 1,
            Symbol::TripleOpen => 2,
            Symbol::Entity(e) => m + e.0,
            Symbol::Relation(r) => m + self.num_entities + r.0,
        }
    }

    pub fn symbol(&self, id: SymbolId) -> Option<Symbol> {
        let m = MARKERS.len() as u32;
        match id {
            i if i < m => Some(MARKERS[i as usize]),
            i if i < m + self.num_entities => Some(Symbol::Entity(EntityId(i - m))),
            i if i < m + self.num_entities + self.num_relations => {
                Some(Symbol::Relation(RelationId(i - m - self.num_entities)))
            }
            _ => None,
        }
    }

    pub fn symbols(&self) -> impl Iterator<Item = Symbol> + '_ {
        (0..self.len() as u32).filter_map(|i| self.symbol(i))
    }

    /// Text a symbol stands for: the marker itself or the label.
    pub fn surface<'g>(&self, g: &'g KnowledgeGraph, symbol: Symbol) -> Option<&'g str> {
        match symbol {
            Symbol::AlignOpen => Some(ALIGN_OPEN),
            Symbol::AlignClose => Some(ALIGN_CLOSE),
            Symbol::TripleOpen => Some(TRIPLE_OPEN),
            Symbol::Entity(e) => g.entity_label(e),
            Symbol::Relation(r) => g.relation_label(r),
        }
    }

    /// Spells every symbol with `tokenizer`, checking that the spelling
    /// decodes back to exactly the symbol's surface text.
    pub fn refine(&self, g: &KnowledgeGraph, tokenizer: &dyn Tokenizer) -> Result<Refinement, VocabError> {
        let mut spellings = Vec::with_capacity(self.len());
        for symbol in self.symbols() {
            let surface = self.surface(g, symbol).ok_or(VocabError::Unknown(symbol))?;
            let tokens = tokenizer.encode(surface);
            if tokens.is_empty() || tokenizer.decode(&tokens) != surface {
                return Err(VocabError::Misspelled {
                    symbol,
                    surface: surface.to_owned(),
                });
            }
            spellings.push(tokens);
        }
        Ok(Refinement {
            vocab: self.clone(),
            spellings,
        })
    }
}

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, tokens: &[u32]) -> String;
}

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("symbol {0:?} is not in the vocabulary")]
    Unknown(Symbol),
    #[error("tokenizer does not round-trip {surface:?} ({symbol:?})")]
    Misspelled { symbol: Symbol, surface: String },
    #[error("symbols {0:?} and {1:?} share a spelling")]
    Ambiguous(Symbol, Symbol),
    #[error("token {0} is not allowed here")]
    Disallowed(u32),
}

/// Token spelling of every symbol.
#[derive(Clone, Debug)]
pub struct Refinement {
    vocab: Vocabulary,
    spellings: Vec<Vec<u32>>,
}

impl Refinement {
    pub fn spelling(&self, symbol: Symbol) -> &[u32] {
        &self.spellings[self.vocab.id(symbol) as usize]
    }

    /// Trie over the spellings of `allowed`.
    pub fn trie(&self, allowed: &[Symbol]) -> Result<TokenTrie, VocabError> {
        let mut trie = TokenTrie {
            nodes: vec![TrieNode::default()],
        };
        for &symbol in allowed {
            let mut node = 0;
            for &tok in self.spelling(symbol) {
                node = match trie.nodes[node].children.get(&tok) {
                    Some(&child) => child,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let child = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(tok, child);
                        child
                    }
                };
            }
            if let Some(other) = trie.nodes[node].terminal {
                return Err(VocabError::Ambiguous(other, symbol));
            }
            trie.nodes[node].terminal = Some(symbol);
        }
        Ok(trie)
    }
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<u32, usize>,
    terminal: Option<Symbol>,
}

#[derive(Clone, Debug)]
pub struct TokenTrie {
    nodes: Vec<TrieNode>,
}

impl TokenTrie {
    pub fn cursor(&self) -> TokenCursor<'_> {
        TokenCursor { trie: self, node: 0 }
    }
}

/// Position inside a partially spelled symbol.
#[derive(Clone, Copy, Debug)]
pub struct TokenCursor<'t> {
    trie: &'t TokenTrie,
    node: usize,
}

impl TokenCursor<'_> {
    /// Tokens that keep the spelling on some allowed symbol, ascending.
    pub fn allowed_tokens(&self) -> Vec<u32> {
        self.trie.nodes[self.node].children.keys().copied().collect()
    }

    pub fn advance(&mut self, token: u32) -> Result<(), VocabError> {
        let child = self.trie.nodes[self.node]
            .children
            .get(&token)
            .ok_or(VocabError::Disallowed(token))?;
        self.node = *child;
        Ok(())
    }

    /// The symbol spelled so far, if the tokens form a complete one. A
    /// complete symbol may still be a prefix of a longer one.
    pub fn completed(&self) -> Option<Symbol> {
        self.trie.nodes[self.node].terminal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecoderState, PathAutomaton, Phase};
    use crate::kg::load_graph;

    /// One token per byte.
    struct Bytes;
    impl Tokenizer for Bytes {
        fn encode(&self, text: &str) -> Vec<u32> {
            text.bytes().map(u32::from).collect()
        }
        fn decode(&self, tokens: &[u32]) -> String {
            String::from_utf8(tokens.iter().map(|&t| t as u8).collect()).unwrap()
        }
    }

    #[test]
    fn ids_are_a_bijection() {
        let g = load_graph("US\tborders\tMexico\nUS\tborders\tCanada\n".as_bytes()).unwrap();
        let v = Vocabulary::for_graph(&g);
        assert_eq!(v.len(), 3 + 3 + 1);
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.symbol(id).unwrap()), id);
        }
        assert_eq!(v.symbol(v.len() as u32), None);
        assert_eq!(v.surface(&g, Symbol::AlignOpen), Some("<ALIGN>"));
    }

    #[test]
    fn trie_constrains_tokens() {
        let g = load_graph("US\tborders\tUSA\nUS\tborders\tUruguay\nUS\tborders\tMexico\n".as_bytes()).unwrap();
        let v = Vocabulary::for_graph(&g);
        let refinement = v.refine(&g, &Bytes).unwrap();
        for s in v.symbols() {
            assert_eq!(Bytes.decode(refinement.spelling(s)), v.surface(&g, s).unwrap());
        }
        let us = g.entity_id("US").unwrap();
        let borders = g.relation_id("borders").unwrap();
        let a = PathAutomaton::new(&g, &[us], 1).unwrap();
        let state = DecoderState {
            phase: Phase::ExpectTail(us, borders),
            emitted: vec![],
        };
        let trie = refinement.trie(&a.allowed(&state)).unwrap();
        let mut cur = trie.cursor();
        assert_eq!(cur.allowed_tokens(), vec![u32::from(b'M'), u32::from(b'U')]);
        cur.advance(u32::from(b'U')).unwrap();
        assert_eq!(cur.allowed_tokens(), vec![u32::from(b'S'), u32::from(b'r')]);
        assert_eq!(cur.advance(u32::from(b'x')), Err(VocabError::Disallowed(u32::from(b'x'))));
        cur.advance(u32::from(b'S')).unwrap();
        cur.advance(u32::from(b'A')).unwrap();
        assert_eq!(cur.completed(), Some(Symbol::Entity(g.entity_id("USA").unwrap())));
        assert!(cur.allowed_tokens().is_empty());
    }

    #[test]
    fn lossy_tokenizer_is_rejected() {
        struct Lossy;
        impl Tokenizer for Lossy {
            fn encode(&self, text: &str) -> Vec<u32> {
                text.bytes().map(|b| u32::from(b.to_ascii_lowercase())).collect()
            }
            fn decode(&self, tokens: &[u32]) -> String {
                tokens.iter().map(|&t| t as u8 as char).collect()
            }
        }
        let g = load_graph("US\tborders\tMexico\n".as_bytes()).unwrap();
        assert!(matches!(
            Vocabulary::for_graph(&g).refine(&g, &Lossy),
            Err(VocabError::Misspelled { .. })
        ));
    }
}
