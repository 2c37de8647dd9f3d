use proptest::prelude::*;
use vncseg_core::io::{read_labels, read_volume, write_labels, write_volume};
use vncseg_core::nn::{load_checkpoint, save_checkpoint, Network, NetworkConfig, Tensor};
use vncseg_core::{Geometry, LabelVolume, Volume, VoxelData};

fn geometry() -> impl Strategy<Value = Geometry> {
    (
        proptest::array::uniform3(1usize..7),
        proptest::array::uniform3(0.1f64..3.0),
        proptest::array::uniform3(-500.0f64..500.0),
    )
        .prop_map(|(dims, spacing_mm, origin_mm)| Geometry::new(dims, spacing_mm, origin_mm).unwrap())
}

fn volume() -> impl Strategy<Value = Volume> {
    (geometry(), 0..3u8).prop_flat_map(|(g, kind)| {
        let n = g.len();
        match kind {
            0 => proptest::collection::vec(any::<i16>(), n).prop_map(VoxelData::Int16).boxed(),
            1 => proptest::collection::vec(any::<u8>(), n).prop_map(VoxelData::Uint8).boxed(),
            _ => proptest::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map(VoxelData::Float32).boxed(),
        }
        .prop_map(move |d| Volume::new(g, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn volumes_round_trip_bit_exactly(v in volume()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert!(back.bit_eq(&v));
        prop_assert_eq!(back.geometry, v.geometry);
    }

    #[test]
    fn labels_round_trip(g in geometry(), seed in any::<u64>()) {
        let data = (0..g.len()).map(|i| ((seed >> (i % 61)) as u8 ^ i as u8) % 8).collect();
        let labels = LabelVolume::new(g, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_labels(&labels, dir.path().join("l")).unwrap();
        prop_assert_eq!(read_labels(dir.path().join("l.mvol.json")).unwrap(), labels);
    }
}

#[test]
fn checkpoint_round_trip_preserves_forward_pass() {
    let cfg = NetworkConfig { base_channels: 4, n_res_blocks: 2, ..Default::default() };
    let net = Network::<f32>::init(&cfg, 21).unwrap();
    let x = Tensor::from_vec([2, 5, 16, 16], (0..2560).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&net, dir.path().join("m")).unwrap();
    let back = load_checkpoint(dir.path().join("m.ckpt.json")).unwrap();
    assert!(net.infer(&x).unwrap().bit_eq(&back.infer(&x).unwrap()));
}
