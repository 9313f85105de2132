mod common;

use candle_core::Device;
use image::{GrayImage, RgbImage};
use uegan_core::data::{self, ImagePool, SplitManifest};
use uegan_core::Error;

#[test]
fn preprocess_scales_long_side_to_512() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("big.png");
    RgbImage::from_fn(1024, 768, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 255])).save(&path).unwrap();
    let t = data::preprocess(&path, 512, &Device::Cpu).unwrap();
    assert_eq!(t.dims(), &[3, 384, 512]);
    let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn portrait_images_scale_their_height() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("tall.png");
    RgbImage::new(300, 600).save(&path).unwrap();
    let t = data::preprocess(&path, 512, &Device::Cpu).unwrap();
    assert_eq!(t.dims(), &[3, 512, 256]);
}

#[test]
fn corrupt_file_error_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("broken.png");
    std::fs::write(&path, b"\x89PNG\r\n\x1a\nthis is not a real png").unwrap();
    let err = data::preprocess(&path, 512, &Device::Cpu).unwrap_err();
    assert!(matches!(err, Error::Image { .. }), "{err}");
    assert!(err.to_string().contains("broken.png"), "{err}");
}

#[test]
fn grayscale_input_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("gray.png");
    GrayImage::new(8, 8).save(&path).unwrap();
    let err = data::decode_rgb(&path).unwrap_err();
    assert!(err.to_string().contains("gray.png"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let err = data::preprocess(std::path::Path::new("/nonexistent/x.png"), 512, &Device::Cpu).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
}

#[test]
fn save_then_preprocess_round_trips_8bit_values() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("rt.png");
    let t = common::pattern_tensor(3, 20, 30, 1.0);
    data::save_image(&t, &path).unwrap();
    let back = data::preprocess(&path, 30, &Device::Cpu).unwrap();
    let err = (back - &t).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(err <= 0.5 / 255.0 + 1e-6, "{err}");
}

#[test]
fn list_images_is_sorted_and_filtered() {
    let tmp = tempfile::tempdir().unwrap();
    common::write_corpus(tmp.path(), 3, 8, 8);
    let raw = tmp.path().join("raw");
    std::fs::write(raw.join("readme.txt"), "x").unwrap();
    std::fs::create_dir(raw.join("sub.png")).unwrap();
    assert_eq!(data::list_images(&raw).unwrap(), ["img000.png", "img001.png", "img002.png"]);
}

#[test]
fn manifest_file_round_trip() {
    let ids: Vec<String> = (0..60).map(|i| format!("{i:04}.png")).collect();
    let m = data::build_splits(&ids, &ids, 9).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("splits.txt");
    m.save(&path).unwrap();
    assert_eq!(SplitManifest::load(&path).unwrap(), m);
}

#[test]
fn splits_only_use_ids_present_in_both_sets() {
    let raw: Vec<String> = (0..60).map(|i| format!("{i:04}")).collect();
    let retouched: Vec<String> = (5..70).map(|i| format!("{i:04}")).collect();
    let m = data::build_splits(&raw, &retouched, 1).unwrap();
    let all: Vec<&String> = m.low_train.iter().chain(&m.high_train).chain(&m.val).chain(&m.test).collect();
    assert!(all.iter().all(|id| raw.contains(id) && retouched.contains(id)));
    assert!(m.is_disjoint());
}

#[test]
fn pool_drops_images_smaller_than_the_crop() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    data::save_image(&common::pattern_tensor(0, 40, 60, 1.0), &dir.join("a.png")).unwrap();
    data::save_image(&common::pattern_tensor(1, 20, 60, 1.0), &dir.join("b.png")).unwrap();
    let ids = vec!["a.png".to_string(), "b.png".to_string()];
    let (pool, rejected) = ImagePool::load(dir, &ids, 60, 32, &Device::Cpu).unwrap();
    assert_eq!(pool.ids(), ["a.png"]);
    assert_eq!(rejected, ["b.png"]);
}

#[test]
fn batches_are_reproducible_per_epoch() {
    let imgs = |off: u64| (0..4).map(|i| (format!("{i}"), common::pattern_tensor(off + i, 40, 40, 1.0))).collect();
    let (low, _) = ImagePool::new(imgs(0), 32).unwrap();
    let (high, _) = ImagePool::new(imgs(10), 32).unwrap();
    let draw = |epoch| {
        let mut rng = data::BatchRng::for_epoch(5, epoch);
        let (l, h) = data::sample_batch(&low, &high, 3, 32, true, &mut rng).unwrap();
        assert_eq!(l.dims(), &[3, 3, 32, 32]);
        (
            l.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            h.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        )
    };
    assert_eq!(draw(2), draw(2));
    assert_ne!(draw(2), draw(3));
}
