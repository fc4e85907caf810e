/// Node labels share one id space with a source form (`N`) and a target
/// form (`->N`), so the vocabulary supports at most this many nodes.
pub const MAX_NODES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Source(usize),
    Target(usize),
    Comma,
    TaskSep,
    Pad,
}

/// Fixed 35-symbol vocabulary: 16 source-form nodes, 16 target-form
/// nodes, `,`, `|`, and padding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub const SIZE: usize = 35;
    pub const COMMA: u32 = 32;
    pub const TASK_SEP: u32 = 33;
    pub const PAD: u32 = 34;

    pub fn id(token: Token) -> u32 {
        match token {
            Token::Source(n) => {
                assert!(n < MAX_NODES, "node {n} out of range");
                n as u32
            }
            Token::Target(n) => {
                assert!(n < MAX_NODES, "node {n} out of range");
                (MAX_NODES + n) as u32
            }
            Token::Comma => Self::COMMA,
            Token::TaskSep => Self::TASK_SEP,
            Token::Pad => Self::PAD,
        }
    }

    pub fn token(id: u32) -> Option<Token> {
        let id = id as usize;
        match id {
            _ if id < MAX_NODES => Some(Token::Source(id)),
            _ if id < 2 * MAX_NODES => Some(Token::Target(id - MAX_NODES)),
            32 => Some(Token::Comma),
            33 => Some(Token::TaskSep),
            34 => Some(Token::Pad),
            _ => None,
        }
    }

    pub fn source(node: usize) -> u32 {
        Self::id(Token::Source(node))
    }

    pub fn target(node: usize) -> u32 {
        Self::id(Token::Target(node))
    }

    /// The node label carried by a token, in either form.
    pub fn node_of(id: u32) -> Option<usize> {
        match Self::token(id)? {
            Token::Source(n) | Token::Target(n) => Some(n),
            _ => None,
        }
    }

    pub fn symbol(id: u32) -> String {
        match Self::token(id) {
            Some(Token::Source(n)) => n.to_string(),
            Some(Token::Target(n)) => format!("→{n}"),
            Some(Token::Comma) => ",".into(),
            Some(Token::TaskSep) => "|".into(),
            Some(Token::Pad) => "PAD".into(),
            None => format!("<{id}>"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijective_over_all_ids() {
        for id in 0..Vocabulary::SIZE as u32 {
            let tok = Vocabulary::token(id).unwrap();
            assert_eq!(Vocabulary::id(tok), id);
        }
        assert_eq!(Vocabulary::token(35), None);
    }

    #[test]
    fn node_forms() {
        assert_eq!(Vocabulary::source(15), 15);
        assert_eq!(Vocabulary::target(15), 31);
        assert_eq!(Vocabulary::node_of(31), Some(15));
        assert_eq!(Vocabulary::node_of(Vocabulary::COMMA), None);
        assert_eq!(Vocabulary::symbol(20), "→4");
    }
}
