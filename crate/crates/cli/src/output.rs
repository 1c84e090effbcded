//! Output directories, atomic file writes and graymap rendering.

use std::fs;
use std::path::Path;

use crate::CliError;

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(dir)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", dir.display())))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    gemzsl::data::write_atomic(path, bytes).map_err(CliError::from)
}

/// Binary graymap of a row-major `h×w` map, min-max scaled to `0..=255`.
/// A constant map renders black.
pub fn pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    assert_eq!(values.len(), h * w, "map size");
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if range > 0.0 {
            ((v - min) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn crc_of(path: &Path) -> Result<u32, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(crc32fast::hash(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_map_has_one_bright_cell() {
        let mut map = vec![0.0; 16];
        map[6] = 1.0;
        let bytes = pgm(&map, 4, 4);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let pixels = &bytes[header.len()..];
        assert_eq!(pixels.len(), 16);
        assert_eq!(pixels.iter().filter(|&&p| p == 255).count(), 1);
        assert_eq!(pixels[6], 255);
        assert!(pixels.iter().enumerate().all(|(i, &p)| i == 6 || p == 0));
    }

    #[test]
    fn scaling_is_min_max() {
        let bytes = pgm(&[2.0, 3.0, 4.0], 1, 3);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
        let flat = pgm(&[0.5; 4], 2, 2);
        assert!(flat[flat.len() - 4..].iter().all(|&p| p == 0));
    }

    #[test]
    fn refuses_occupied_directory() {
        let dir = tempfile::tempdir().unwrap();
        prepare_dir(dir.path(), false).unwrap();
        fs::write(dir.path().join("x"), b"1").unwrap();
        let err = prepare_dir(dir.path(), false).unwrap_err();
        assert!(err.message.contains("--force"));
        prepare_dir(dir.path(), true).unwrap();
        prepare_dir(&dir.path().join("new/nested"), false).unwrap();
    }

    #[test]
    fn write_leaves_no_tmp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write(&path, b"x\n").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"x\n");
        assert!(!dir.path().join("a.csv.tmp").exists());
    }
}
