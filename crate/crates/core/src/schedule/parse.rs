use super::{ClipStep, MergeSchedule, ScheduleDefaults};
use crate::error::{Error, Result};

/// Parses `F@L1:C1@L2:C2... [r=N] [Rc=X] [Ri=X] [start=L] [tail=on|off] [gap=on|off]`.
///
/// Options missing from the text take their value from `defaults`.
/// Errors carry the 1-based column of the offending character.
pub fn parse_schedule_with(text: &str, defaults: ScheduleDefaults) -> Result<MergeSchedule> {
    let mut words = words(text).into_iter();
    let Some((col0, head)) = words.next() else {
        return err(1, "empty schedule");
    };

    let mut sched = MergeSchedule {
        frames: 0,
        img_r: defaults.img_r,
        start_clip: None,
        steps: Vec::new(),
        keep_cross: defaults.keep_cross,
        keep_intra: defaults.keep_intra,
        tail_intra: true,
        gap_intra: true,
    };
    parse_steps(head, col0, &mut sched)?;

    let mut start: Option<(usize, usize)> = None;
    let mut seen: Vec<&str> = Vec::new();
    for (col, word) in words {
        let Some(eq) = word.find('=') else {
            return err(col, format!("expected key=value, found `{word}`"));
        };
        let (key, value) = (&word[..eq], &word[eq + 1..]);
        let vcol = col + eq + 1;
        if seen.contains(&key) {
            return err(col, format!("option `{key}` given twice"));
        }
        match key {
            "r" => sched.img_r = parse_uint(value, vcol)?,
            "Rc" => sched.keep_cross = parse_ratio(value, vcol)?,
            "Ri" => sched.keep_intra = parse_ratio(value, vcol)?,
            "start" => {
                let s = parse_uint(value, vcol)?;
                if s == 0 {
                    return err(vcol, "layers are numbered from 1");
                }
                start = Some((s, vcol));
            }
            "tail" => sched.tail_intra = parse_flag(value, vcol)?,
            "gap" => sched.gap_intra = parse_flag(value, vcol)?,
            _ => return err(col, format!("unknown option `{key}`")),
        }
        seen.push(key);
    }

    for (name, value) in [("Rc", sched.keep_cross), ("Ri", sched.keep_intra)] {
        if !(value > 0.0 && value <= 1.0) {
            return err(1, format!("default {name}={value} outside (0, 1]"));
        }
    }

    let first_layer = sched.steps.first().map(|s| s.layer);
    sched.start_clip = match (start, first_layer) {
        (Some((s, col)), Some(l1)) if s > l1 => {
            return err(col, format!("start={s} is after the first fusion layer {l1}"));
        }
        (Some((s, _)), _) => Some(s),
        (None, l1) => l1,
    };
    Ok(sched)
}

fn parse_steps(head: &str, col0: usize, sched: &mut MergeSchedule) -> Result<()> {
    let mut parts = head.split('@');
    let frames_txt = parts.next().unwrap_or_default();
    sched.frames = parse_uint(frames_txt, col0)?;
    if sched.frames == 0 {
        return err(col0, "frame count must be positive");
    }
    let mut col = col0 + frames_txt.len() + 1;
    let mut prev_layer = 0usize;
    let mut prev_clips = sched.frames;
    for part in parts {
        let Some(colon) = part.find(':') else {
            return err(col, format!("expected LAYER:CLIPS, found `{part}`"));
        };
        let (layer_txt, clips_txt) = (&part[..colon], &part[colon + 1..]);
        let clips_col = col + colon + 1;
        let layer = parse_uint(layer_txt, col)?;
        if layer == 0 {
            return err(col, "layers are numbered from 1");
        }
        if layer <= prev_layer {
            return err(col, format!("layer {layer} does not follow layer {prev_layer}"));
        }
        let clips = parse_uint(clips_txt, clips_col)?;
        if clips == 0 || clips >= prev_clips || !prev_clips.is_multiple_of(clips) {
            return err(clips_col, format!("{clips} clips does not evenly group the previous {prev_clips}"));
        }
        sched.steps.push(ClipStep { layer, clips });
        prev_layer = layer;
        prev_clips = clips;
        col += part.len() + 1;
    }
    Ok(())
}

/// Whitespace-separated words with their 1-based starting columns.
fn words(text: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s + 1, &text[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &text[s..]));
    }
    out
}

fn parse_uint(s: &str, col: usize) -> Result<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return err(col, format!("expected a non-negative integer, found `{s}`"));
    }
    s.parse().or_else(|_| err(col, format!("integer `{s}` out of range")))
}

fn parse_ratio(s: &str, col: usize) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
        Ok(v) => err(col, format!("ratio {v} outside (0, 1]")),
        Err(_) => err(col, format!("expected a number, found `{s}`")),
    }
}

fn parse_flag(s: &str, col: usize) -> Result<bool> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => err(col, format!("expected on/off, found `{s}`")),
    }
}

fn err<T>(column: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { column, msg: msg.into() })
}
