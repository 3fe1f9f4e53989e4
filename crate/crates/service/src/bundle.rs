use std::io::{Cursor, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipWriter};

/// Zips every regular file directly inside `dir`, in name order.
pub fn zip_dir(dir: &Path) -> std::io::Result<Vec<u8>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .map(|e| e.file_name())
        .collect();
    names.sort();
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    let opts = SimpleFileOptions::default().compression_method(CompressionMethod::Deflated);
    for name in names {
        let bytes = std::fs::read(dir.join(&name))?;
        zip.start_file(name.to_string_lossy(), opts).map_err(std::io::Error::other)?;
        zip.write_all(&bytes)?;
    }
    Ok(zip.finish().map_err(std::io::Error::other)?.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_files() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        std::fs::write(dir.join("b.txt"), "beta").unwrap();
        std::fs::write(dir.join("a.txt"), "alpha").unwrap();
        std::fs::create_dir(dir.join("sub")).unwrap();
        let bytes = zip_dir(dir).unwrap();
        let mut archive = zip::ZipArchive::new(Cursor::new(bytes)).unwrap();
        let names: Vec<_> = archive.file_names().map(str::to_owned).collect();
        assert_eq!(archive.len(), 2);
        assert!(names.contains(&"a.txt".to_owned()));
        let mut s = String::new();
        std::io::Read::read_to_string(&mut archive.by_name("b.txt").unwrap(), &mut s).unwrap();
        assert_eq!(s, "beta");
    }
}
