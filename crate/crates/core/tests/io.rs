//! Image files, raw tensors and checkpoints on disk.

use aelpn::checkpoint::Checkpoint;
use aelpn::data::{self, Image, PnmEncoding, RawTensor};
use aelpn::experiments::{image_pools, DataSource};
use aelpn::potential::{PotentialVariant, ProxModel, VariantKind};
use aelpn::rng::Rng;
use aelpn::Error;

fn gradient_image(w: usize, h: usize) -> Image {
    let px = (0..w * h).map(|i| (i % 256) as f64 / 255.0).collect();
    Image::new(w, h, px).unwrap()
}

#[test]
fn image_directory_loads_every_supported_format_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = gradient_image(20, 18);
    data::write_pnm(dir.path().join("b.pgm"), &a, PnmEncoding::Binary).unwrap();
    data::write_pnm(dir.path().join("a.pgm"), &Image::constant(17, 17, 0.5).unwrap(), PnmEncoding::Ascii).unwrap();
    let t = RawTensor::new(vec![2, 16, 16], vec![0.25; 512]).unwrap();
    data::write_raw_tensor(dir.path().join("c.aelp"), &t).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();

    let images = data::load_image_dir(dir.path()).unwrap();
    assert_eq!(images.len(), 4);
    assert_eq!((images[0].width(), images[0].height()), (17, 17));
    assert!(images[1].pixels().iter().zip(a.pixels()).all(|(u, v)| (u - v).abs() < 1e-12));
    assert!(images[2..].iter().all(|im| im.pixels().iter().all(|&v| v == 0.25)));

    let (train, eval) = image_pools(&DataSource::Dir(dir.path().into()), 3).unwrap();
    assert_eq!(train.len() + eval.len(), 4);
    assert!(!eval.is_empty());
}

#[test]
fn empty_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(data::load_image_dir(dir.path()), Err(Error::EmptySource(_))));
}

#[test]
fn truncated_image_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cut.pgm");
    let bytes = data::encode_pnm(&gradient_image(8, 8), PnmEncoding::Binary).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
    let err = data::load_pnm(&p).unwrap_err();
    assert!(err.is_io(), "{err}");
}

#[test]
fn checkpoint_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (i, kind) in VariantKind::ALL.into_iter().enumerate() {
        let cfg = kind.default_config(9, vec![10, 6]);
        let m = ProxModel::init(PotentialVariant::new(kind, 0.3).unwrap(), &cfg, &mut Rng::new(i as u64)).unwrap();
        let path = dir.path().join(format!("{}.ckpt", kind.tag()));
        Checkpoint::new(m.clone(), 77).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.seed, 77);
        assert_eq!(back.model.variant(), m.variant());
        for (a, b) in back.model.params().tensors().iter().zip(m.params().tensors()) {
            assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = VariantKind::AffineEq.default_config(4, vec![4]);
    let m = ProxModel::init(PotentialVariant::new(VariantKind::AffineEq, 0.0).unwrap(), &cfg, &mut Rng::new(0)).unwrap();
    let bytes = Checkpoint::new(m, 0).to_bytes();
    for cut in [10, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let text = String::from_utf8_lossy(&bytes).replacen("format_version=1", "format_version=9", 1);
    let newer = Checkpoint::from_bytes(text.as_bytes()).unwrap_err();
    assert!(matches!(newer, Error::UnsupportedVersion { found: 9, .. }), "{newer}");
    assert!(matches!(Checkpoint::load("/nonexistent/x.ckpt"), Err(Error::Io { .. })));
}
