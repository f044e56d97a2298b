//! 8-bit binary PGM snapshots of single field channels.

use std::path::Path;

use phicnet::Field;

/// Grey levels span `[-m, m]` with `m = max|value|` (mid-grey is zero), so
/// signed fields keep their sign visible.
pub fn encode(field: &Field, channel: usize) -> Vec<u8> {
    let data = field.channel(channel);
    let m = data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut out = format!("P5\n{} {}\n255\n", field.width(), field.height()).into_bytes();
    out.extend(data.iter().map(|v| {
        if m == 0.0 || !v.is_finite() {
            128
        } else {
            (127.5 * (v / m + 1.0)).round().clamp(0.0, 255.0) as u8
        }
    }));
    out
}

pub fn write(path: &Path, field: &Field, channel: usize) -> std::io::Result<()> {
    std::fs::write(path, encode(field, channel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use phicnet::Shape;

    #[test]
    fn header_and_levels() {
        let f = Field::from_vec(Shape::new(1, 1, 3), vec![-2.0, 0.0, 2.0]).unwrap();
        let bytes = encode(&f, 0);
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255]);
        assert!(encode(&Field::zeros(Shape::new(1, 2, 2)), 0).ends_with(&[128; 4]));
    }
}
