use cascade_depth::dataio::{read_depth_png, read_image, read_pfm, write_depth_png, write_pfm, write_png};
use cascade_depth::imaging::{ImageGrid, Mask};

#[test]
fn pfm_and_png_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let depth = ImageGrid::from_fn(5, 7, 1, |y, x, _| 0.5 + y as f64 * 7.25 + x as f64 * 1.5).unwrap();
    let pfm = dir.path().join("d.pfm");
    write_pfm(&pfm, &depth).unwrap();
    let back = read_pfm(&pfm).unwrap();
    for (a, b) in back.as_slice().iter().zip(depth.as_slice()) {
        assert_eq!(*a, *b as f32 as f64);
    }

    let png = dir.path().join("d.png");
    let valid = Mask::from_fn(5, 7, |y, x| (x + y) % 3 != 0);
    write_depth_png(&png, &depth, Some(&valid)).unwrap();
    let (d, m) = read_depth_png(&png).unwrap();
    assert_eq!(m, valid);
    for i in 0..35 {
        if valid.as_slice()[i] {
            assert!((d.as_slice()[i] - depth.as_slice()[i]).abs() <= 1.0 / 512.0);
        }
    }

    let rgb = ImageGrid::from_fn(4, 4, 3, |y, x, c| ((y * 4 + x) * 3 + c) as f64 / 47.0).unwrap();
    let img = dir.path().join("rgb.png");
    write_png(&img, &rgb).unwrap();
    let back = read_image(&img).unwrap();
    for (a, b) in back.as_slice().iter().zip(rgb.as_slice()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
    }
}

#[test]
fn truncated_pfm_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.pfm");
    std::fs::write(&path, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
    let err = read_pfm(&path).unwrap_err().to_string();
    assert!(err.contains("16") && err.contains('4'), "{err}");
}
