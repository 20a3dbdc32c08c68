use agcl_core::data::{self, DatasetSpec, Geometric, Photometric, Sample};
use agcl_core::tensor::{ImageTensor, LabelMap};
use agcl_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        count: 12,
        size: 16,
        classes: 2,
        labeled_fraction: 0.25,
        seed,
        radius_min: 2.0,
        radius_max: 3.0,
        blobs_max: 1,
        ..DatasetSpec::default()
    }
}

#[test]
fn tensor_and_mask_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::new(2, 3, 4, (0..24).map(|i| i as f32 / 7.0).collect()).unwrap();
    let mask = LabelMap::new(3, 4, (0..12).map(|i| (i % 3) as u8).collect()).unwrap();
    let (ip, mp) = (dir.path().join("a/x.agt"), dir.path().join("b/x.agm"));
    data::write_tensor(&img, &ip).unwrap();
    data::write_mask(&mask, &mp).unwrap();
    assert_eq!(data::read_tensor(&ip).unwrap(), img);
    assert_eq!(data::read_mask(&mp).unwrap(), mask);
}

#[test]
fn dataset_round_trip_preserves_samples_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let samples = data::generate(&small_spec(3)).unwrap();
    data::write_dataset(dir.path(), &samples).unwrap();
    assert_eq!(data::read_dataset(dir.path()).unwrap(), samples);
    let split = std::fs::read_to_string(dir.path().join("split.txt")).unwrap();
    assert_eq!(split.lines().filter(|l| l.ends_with(" labeled")).count(), 3);
}

#[test]
fn rewriting_the_same_spec_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    data::write_dataset(a.path(), &data::generate(&small_spec(9)).unwrap()).unwrap();
    data::write_dataset(b.path(), &data::generate(&small_spec(9)).unwrap()).unwrap();
    for sub in ["images/0005.agt", "masks/0005.agm", "split.txt"] {
        assert_eq!(
            std::fs::read(a.path().join(sub)).unwrap(),
            std::fs::read(b.path().join(sub)).unwrap(),
            "{sub}"
        );
    }
}

#[test]
fn truncated_files_are_rejected() {
    let img = ImageTensor::filled(1, 4, 4, 0.5);
    let bytes = data::encode_tensor(&img);
    for cut in [2, 5, 12, bytes.len() - 1] {
        let err = data::decode_tensor(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err:?}");
    }
    let mask = data::encode_mask(&LabelMap::zeros(4, 4));
    assert!(matches!(
        data::decode_mask(&mask[..mask.len() - 3]),
        Err(Error::Truncated { .. })
    ));
}

#[test]
fn flipped_payload_bit_fails_the_crc() {
    let img = ImageTensor::filled(1, 4, 4, 0.25);
    let mut bytes = data::encode_tensor(&img);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    match data::decode_tensor(&bytes) {
        Err(Error::Crc { offset, .. }) => assert_eq!(offset, bytes.len() - 4),
        other => panic!("expected a CRC error, got {other:?}"),
    }
    let mut mask = data::encode_mask(&LabelMap::zeros(3, 3));
    let last = mask.len() - 5;
    mask[last] ^= 1;
    assert!(matches!(data::decode_mask(&mask), Err(Error::Crc { .. })));
}

#[test]
fn wrong_magic_is_reported() {
    let bytes = data::encode_mask(&LabelMap::zeros(2, 2));
    assert!(matches!(data::decode_tensor(&bytes), Err(Error::BadMagic { .. })));
}

fn centroid(mask: &LabelMap, class: u8) -> (f64, f64) {
    let w = mask.width();
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for (i, &l) in mask.data().iter().enumerate() {
        if l == class {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
            n += 1.0;
        }
    }
    (sy / n, sx / n)
}

fn square_sample() -> Sample {
    let (h, w) = (16, 16);
    let mut mask = LabelMap::zeros(h, w);
    let mut image = ImageTensor::zeros(1, h, w);
    for y in 5..9 {
        for x in 4..7 {
            mask.set(y, x, 1);
            image.set(0, y, x, 1.0);
        }
    }
    Sample {
        id: 0,
        image,
        mask,
        labeled: true,
    }
}

#[test]
fn geometric_ops_move_image_and_mask_together() {
    let s = square_sample();
    let (cy, cx) = centroid(&s.mask, 1);
    for flip in [false, true] {
        for (dy, dx) in [(0, 0), (2, -1), (-2, 2)] {
            let g = Geometric { flip, dy, dx };
            let out = g.apply(&s);
            assert_eq!(out.mask.count(1), s.mask.count(1), "interior blob keeps its area");
            let (ny, nx) = centroid(&out.mask, 1);
            let ex = if flip { 15.0 - cx } else { cx } + dx as f64;
            assert!((ny - (cy + dy as f64)).abs() < 1e-12 && (nx - ex).abs() < 1e-12);
            // Image intensity follows the mask pixel for pixel.
            for (m, &l) in out.mask.data().iter().enumerate() {
                assert_eq!(out.image.data()[m] == 1.0, l == 1);
            }
        }
    }
}

#[test]
fn strong_noise_has_half_normal_mean_deviation() {
    let base = ImageTensor::filled(1, 64, 64, 0.5);
    let photo = Photometric {
        noise_sigma: 0.1,
        ..Photometric::identity()
    };
    let out = photo.apply(&base, &mut ChaCha8Rng::seed_from_u64(4));
    let mad = out
        .data()
        .iter()
        .map(|&v| (v as f64 - 0.5).abs())
        .sum::<f64>()
        / out.data().len() as f64;
    let expected = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
    assert!((mad - expected).abs() <= 0.1 * expected, "mad {mad}, expected {expected}");
}

#[test]
fn strong_augmentation_leaves_mask_to_geometry() {
    let s = square_sample();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let out = data::augment_strong(&s, &mut rng);
    assert_eq!(out.mask.count(1), s.mask.count(1));
    assert!(out.image.all_in_unit_range());
}
