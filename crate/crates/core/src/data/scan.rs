use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::group::{ActionError, ActionKind, GroupAction};
use crate::rng::substream;

pub const COMMAND_WORDS: [&str; 9] = ["walk", "run", "jump", "look", "left", "right", "twice", "thrice", "and"];
pub const ACTION_WORDS: [&str; 6] = ["WALK", "RUN", "JUMP", "LOOK", "LTURN", "RTURN"];

const LEFT: usize = 4;
const RIGHT: usize = 5;
const TWICE: usize = 6;
const THRICE: usize = 7;
const AND: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScanError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("not a command: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScanPair {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl ScanPair {
    pub fn from_command(input: Vec<usize>) -> Result<Self, ScanError> {
        let output = interpret(&input)?;
        Ok(Self { input, output })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanSplit {
    AddJump,
    AroundRight,
}

impl ScanSplit {
    pub fn name(self) -> &'static str {
        match self {
            ScanSplit::AddJump => "add_jump",
            ScanSplit::AroundRight => "around_right",
        }
    }

    fn held_out(self) -> usize {
        match self {
            ScanSplit::AddJump => 2,
            ScanSplit::AroundRight => RIGHT,
        }
    }

    /// Input words swapped by the split's Z2: jump/run or left/right.
    pub fn input_pair(self) -> [usize; 2] {
        match self {
            ScanSplit::AddJump => [1, 2],
            ScanSplit::AroundRight => [LEFT, RIGHT],
        }
    }

    /// Output symbols swapped alongside: JUMP/RUN or LTURN/RTURN.
    pub fn output_pair(self) -> [usize; 2] {
        match self {
            ScanSplit::AddJump => [1, 2],
            ScanSplit::AroundRight => [4, 5],
        }
    }

    pub fn input_action(self) -> GroupAction {
        GroupAction::cyclic(2, ActionKind::TokenSwap { pairs: vec![self.input_pair()] }).expect("z2 swap")
    }

    /// Acts on output symbols and on decoder logits (markers are fixed).
    pub fn output_action(self) -> GroupAction {
        GroupAction::cyclic(2, ActionKind::TokenSwap { pairs: vec![self.output_pair()] }).expect("z2 swap")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanCorpus {
    pub split: ScanSplit,
    pub train: Vec<ScanPair>,
    pub val: Vec<ScanPair>,
    pub test: Vec<ScanPair>,
}

impl ScanCorpus {
    pub fn max_output_len(&self) -> usize {
        self.train.iter().chain(&self.val).chain(&self.test).map(|p| p.output.len()).max().unwrap_or(0)
    }
}

pub fn encode_command(text: &str) -> Result<Vec<usize>, ScanError> {
    text.split_whitespace()
        .map(|w| COMMAND_WORDS.iter().position(|c| *c == w).ok_or_else(|| ScanError::UnknownWord(w.into())))
        .collect()
}

pub fn decode_actions(text: &str) -> Result<Vec<usize>, ScanError> {
    text.split_whitespace()
        .map(|w| ACTION_WORDS.iter().position(|c| *c == w).ok_or_else(|| ScanError::UnknownWord(w.into())))
        .collect()
}

pub fn render_command(ids: &[usize]) -> String {
    ids.iter().map(|&i| COMMAND_WORDS.get(i).copied().unwrap_or("?")).collect::<Vec<_>>().join(" ")
}

pub fn render_actions(ids: &[usize]) -> String {
    ids.iter().map(|&i| ACTION_WORDS.get(i).copied().unwrap_or("?")).collect::<Vec<_>>().join(" ")
}

fn parse_s(ids: &[usize]) -> Result<Vec<usize>, ScanError> {
    let err = || ScanError::Parse(render_command(ids));
    let (v, reps) = match ids.last() {
        Some(&TWICE) => (&ids[..ids.len() - 1], 2),
        Some(&THRICE) => (&ids[..ids.len() - 1], 3),
        _ => (ids, 1),
    };
    let one = match v {
        [u] if *u < 4 => vec![*u],
        [u, d] if *u < 4 && (*d == LEFT || *d == RIGHT) => vec![*d, *u],
        _ => return Err(err()),
    };
    Ok(one.repeat(reps))
}

/// Reference semantics of the grammar
/// `C := S | S and S`, `S := V | V twice | V thrice`, `V := U | U D`,
/// where `U D` turns towards `D` and then acts.
pub fn interpret(ids: &[usize]) -> Result<Vec<usize>, ScanError> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= COMMAND_WORDS.len()) {
        return Err(ScanError::UnknownWord(format!("#{bad}")));
    }
    let parts: Vec<&[usize]> = ids.split(|&t| t == AND).collect();
    if parts.len() > 2 {
        return Err(ScanError::Parse(render_command(ids)));
    }
    let mut out = Vec::new();
    for p in parts {
        out.extend(parse_s(p)?);
    }
    Ok(out)
}

/// Every command of the grammar, in a fixed order (1332 of them).
pub fn all_commands() -> Vec<Vec<usize>> {
    let mut v = Vec::new();
    for u in 0..4 {
        v.push(vec![u]);
        for d in [LEFT, RIGHT] {
            v.push(vec![u, d]);
        }
    }
    let mut s = Vec::new();
    for x in &v {
        s.push(x.clone());
        for r in [TWICE, THRICE] {
            let mut y = x.clone();
            y.push(r);
            s.push(y);
        }
    }
    let mut c = s.clone();
    for a in &s {
        for b in &s {
            let mut y = a.clone();
            y.push(AND);
            y.extend(b);
            c.push(y);
        }
    }
    c
}

/// Train/val/test corpus. Train and val hold every command without the
/// held-out word (val is a seeded 10% of them); train also holds the bare
/// primitive uses of that word. Test holds every remaining command.
pub fn gen_scan(split: ScanSplit, seed: u64) -> ScanCorpus {
    let held = split.held_out();
    let is_primitive = |c: &[usize]| match split {
        ScanSplit::AddJump => c == [held],
        ScanSplit::AroundRight => c.len() == 2 && c[1] == held,
    };
    let mut pool = Vec::new();
    let mut primitives = Vec::new();
    let mut test = Vec::new();
    for c in all_commands() {
        let pair = ScanPair::from_command(c).expect("grammar command");
        if !pair.input.contains(&held) {
            pool.push(pair);
        } else if is_primitive(&pair.input) {
            primitives.push(pair);
        } else {
            test.push(pair);
        }
    }
    pool.shuffle(&mut substream(seed, "scan.val"));
    let val = pool.split_off(pool.len() - pool.len() / 10);
    pool.extend(primitives);
    ScanCorpus {
        split,
        train: pool,
        val,
        test,
    }
}

/// `g·(x, y)`: the split's word swap on the command and the symbol swap on
/// the actions, together.
pub fn apply_group_to_pair(split: ScanSplit, g: usize, pair: &ScanPair) -> Result<ScanPair, ActionError> {
    Ok(ScanPair {
        input: split.input_action().act_tokens(g, &pair.input)?,
        output: split.output_action().act_tokens(g, &pair.output)?,
    })
}
