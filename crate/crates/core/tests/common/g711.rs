//! Encoder oracle built from the published G.711 segment end points by interval search.
//!
//! Negative inputs use the ones' complement magnitude, as the ITU-T G.191 reference does.

/// mu-law segment end points on the 14-bit magnitude scale.
const MU_ENDS: [i32; 8] = [31, 95, 223, 479, 991, 2015, 4063, 8159];
/// A-law segment end points on the 13-bit magnitude scale.
const A_ENDS: [i32; 8] = [32, 64, 128, 256, 512, 1024, 2048, 4096];

fn ones_complement_magnitude(pcm: i16) -> i32 {
    if pcm < 0 {
        -(pcm as i32) - 1
    } else {
        pcm as i32
    }
}

/// (segment, step) of `m` given segment end points and the start of the first segment.
fn locate(m: i32, ends: &[i32; 8], first_start: i32) -> (i32, i32) {
    let mut start = first_start;
    for (s, &end) in ends.iter().enumerate() {
        if m < end {
            let step = (end - start) / 16;
            return (s as i32, (m - start) / step);
        }
        start = end;
    }
    (7, 15)
}

pub fn mulaw_oracle(pcm: i16) -> u8 {
    let m = ones_complement_magnitude(pcm) / 4;
    // the first interval is [0, 1): one unit wide, then steps of two
    let (seg, q) = locate(m, &MU_ENDS, -1);
    let sign = if pcm >= 0 { 0x80 } else { 0 };
    (sign | (!(seg << 4 | q) & 0x7F)) as u8
}

pub fn alaw_oracle(pcm: i16) -> u8 {
    let m = ones_complement_magnitude(pcm) / 8;
    let (seg, q) = locate(m, &A_ENDS, 0);
    let sign = if pcm >= 0 { 0x80 } else { 0 };
    ((sign | seg << 4 | q) ^ 0x55) as u8
}
