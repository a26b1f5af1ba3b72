//! Key-frame extraction, KFSA attention masks, and KFDS frame selection.
//!
//! Key frames are the positions whose intermediate-CTC argmax is non-blank,
//! with only the first frame of each consecutive duplicate run kept. KFSA
//! turns them into a T×T attention mask; KFDS turns them into a kept-frame
//! index set that physically shortens the sequence to at most (2w+1)·|P|.

use serde::{Deserialize, Serialize};

/// Sorted non-blank key-frame positions for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyFrameSet {
    pub positions: Vec<usize>,
    pub t: usize,
    pub blank_id: usize,
}

/// Which support the KFSA mask uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KfsaMode {
    /// Shared-window local term plus global key-frame columns.
    WindowPlusK,
    /// Shared-window local term only.
    WindowOnly,
    /// Key frames only: support is exactly P×P.
    KOnly,
    /// All-ones mask; attention is unrestricted.
    Dense,
}

impl std::fmt::Display for KfsaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            KfsaMode::WindowPlusK => "window_plus_k",
            KfsaMode::WindowOnly => "window_only",
            KfsaMode::KOnly => "k_only",
            KfsaMode::Dense => "dense",
        };
        f.write_str(s)
    }
}

/// T×T boolean attention mask. `bits[t1*t + t2]` says whether query row t1
/// may attend to key column t2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub bits: Vec<bool>,
    pub t: usize,
    pub mode: KfsaMode,
    pub w: usize,
}

impl AttentionMask {
    pub fn dense(t: usize) -> AttentionMask {
        AttentionMask {
            bits: vec![true; t * t],
            t,
            mode: KfsaMode::Dense,
            w: 0,
        }
    }

    pub fn allowed(&self, t1: usize, t2: usize) -> bool {
        self.bits[t1 * self.t + t2]
    }

    pub fn row(&self, t1: usize) -> &[bool] {
        &self.bits[t1 * self.t..(t1 + 1) * self.t]
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

/// Sorted kept-frame indices produced by KFDS for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSelection {
    pub kept: Vec<usize>,
    pub t: usize,
    pub drop_ratio: f64,
    /// True when P was empty and the selection fell back to keeping all frames.
    pub fallback: bool,
}

impl FrameSelection {
    pub fn identity(t: usize) -> FrameSelection {
        FrameSelection {
            kept: (0..t).collect(),
            t,
            drop_ratio: 0.0,
            fallback: false,
        }
    }
}

/// Positions of non-blank frames, keeping only the first frame of each
/// maximal run of identical consecutive non-blank ids. Runs are broken by
/// blanks or by a different id.
pub fn extract_key_frames(frame_ids: &[usize], blank_id: usize) -> KeyFrameSet {
    let mut positions = Vec::new();
    let mut prev: Option<usize> = None;
    for (t, &id) in frame_ids.iter().enumerate() {
        if id != blank_id && prev != Some(id) {
            positions.push(t);
        }
        prev = if id == blank_id { None } else { Some(id) };
    }
    KeyFrameSet {
        positions,
        t: frame_ids.len(),
        blank_id,
    }
}

fn active_set(p: &[usize], t: usize, w: usize) -> Vec<bool> {
    let mut active = vec![false; t];
    for &kp in p {
        let lo = kp.saturating_sub(w);
        let hi = (kp + w).min(t.saturating_sub(1));
        for a in active.iter_mut().take(hi + 1).skip(lo) {
            *a = true;
        }
    }
    active
}

/// Builds the KFSA mask for key-frame set `p` over length `t`.
///
/// Local term: t1 and t2 both lie in the window of a common key frame.
/// Global term: t1 is within w of some key frame and t2 is a key frame.
/// Rows outside every window are all-zero and skipped from attention.
pub fn build_kfsa_mask(p: &KeyFrameSet, t: usize, w: usize, mode: KfsaMode) -> AttentionMask {
    assert_eq!(p.t, t, "key-frame set length {} vs mask length {t}", p.t);
    if mode == KfsaMode::Dense {
        return AttentionMask::dense(t);
    }
    let eff_w = if mode == KfsaMode::KOnly { 0 } else { w };
    let mut bits = vec![false; t * t];
    // Local term: union of window×window squares.
    for &kp in &p.positions {
        let lo = kp.saturating_sub(eff_w);
        let hi = (kp + eff_w).min(t.saturating_sub(1));
        for t1 in lo..=hi {
            for t2 in lo..=hi {
                bits[t1 * t + t2] = true;
            }
        }
    }
    // Global term: every active row may attend to every key-frame column.
    if mode != KfsaMode::WindowOnly {
        let active = active_set(&p.positions, t, eff_w);
        for t1 in 0..t {
            if !active[t1] {
                continue;
            }
            for &t2 in &p.positions {
                bits[t1 * t + t2] = true;
            }
        }
    }
    AttentionMask {
        bits,
        t,
        mode,
        w: eff_w,
    }
}

/// Looser OR-form variant: allow (t1,t2) when t1 is within w of some key
/// frame OR t2 is a key frame, so active rows attend everywhere. Kept as a
/// comparison point; `build_kfsa_mask` is the default.
pub fn build_kfsa_mask_or_form(p: &KeyFrameSet, t: usize, w: usize) -> AttentionMask {
    assert_eq!(p.t, t, "key-frame set length {} vs mask length {t}", p.t);
    let active = active_set(&p.positions, t, w);
    let mut key_col = vec![false; t];
    for &kp in &p.positions {
        key_col[kp] = true;
    }
    let mut bits = vec![false; t * t];
    for t1 in 0..t {
        for t2 in 0..t {
            bits[t1 * t + t2] = active[t1] || key_col[t2];
        }
    }
    AttentionMask {
        bits,
        t,
        mode: KfsaMode::WindowPlusK,
        w,
    }
}

/// KFDS selection: union of [p-w, p+w] windows over all key frames,
/// clipped to [0, T). Empty P keeps everything and sets the fallback flag.
pub fn select_kfds_frames(p: &KeyFrameSet, t: usize, w: usize) -> FrameSelection {
    assert_eq!(p.t, t, "key-frame set length {} vs selection length {t}", p.t);
    if p.positions.is_empty() {
        return FrameSelection {
            fallback: true,
            ..FrameSelection::identity(t)
        };
    }
    let keep = active_set(&p.positions, t, w);
    let kept: Vec<usize> = (0..t).filter(|&i| keep[i]).collect();
    let drop_ratio = 1.0 - kept.len() as f64 / t as f64;
    FrameSelection {
        kept,
        t,
        drop_ratio,
        fallback: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feasibility {
    Ok,
    FallbackNeeded,
}

/// CTC needs at least 2U+1 output frames for a U-token reference.
pub fn check_ctc_feasible(selection: &FrameSelection, u: usize) -> Feasibility {
    if selection.kept.len() >= 2 * u + 1 {
        Feasibility::Ok
    } else {
        Feasibility::FallbackNeeded
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropRatioStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn drop_ratio_stats(selections: &[FrameSelection]) -> DropRatioStats {
    assert!(!selections.is_empty(), "drop_ratio_stats over empty list");
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for s in selections {
        sum += s.drop_ratio;
        min = min.min(s.drop_ratio);
        max = max.max(s.drop_ratio);
    }
    DropRatioStats {
        mean: sum / selections.len() as f64,
        min,
        max,
    }
}
