//! Layer graph, block builders, FLOP accounting, link inspection and
//! checkpoints.

pub mod arch;
pub mod builders;
pub mod checkpoint;
pub mod flops;
pub mod gamma;
pub mod graph;
pub mod layers;

pub use arch::{ArchSpec, Family, Toggles};
pub use builders::{
    build_basic_block, build_el_bottleneck, build_el_mobilenet_block, build_initialized,
    build_network,
};
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor};
pub use flops::{el_overhead, flops_count, FlopReport, LayerFlops, Overhead};
pub use gamma::{dump_gamma, render_gamma_table, Change, GammaEntry};
pub use graph::{LayerGraph, ShapeTrace};
pub use layers::{Backend, BinConvLayer, ConvRole, Layer, Mode, ParamKind, ParamView};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{ConvSpec, ScaleMode};
    use crate::elastic_link::LinkMode;
    use crate::tensor::{Shape4, Tensor};

    fn links(layers: &[Layer<f32>]) -> Vec<(String, LinkMode, f32, bool)> {
        let g = LayerGraph {
            arch: None,
            input: (1, 1, 1),
            layers: layers.to_vec(),
        };
        g.binary_layers()
            .into_iter()
            .filter_map(|b| {
                b.link
                    .as_ref()
                    .map(|l| (b.name.clone(), l.mode(), l.cfg.gamma_init, l.cfg.downsample))
            })
            .collect()
    }

    #[test]
    fn bottleneck_gamma_inits() {
        let t = Toggles::default();
        let frag = build_el_bottleneck::<f32>("b", 256, 64, 256, false, &t).unwrap();
        let l = links(&frag);
        let inits: Vec<f32> = l.iter().map(|x| x.2).collect();
        assert_eq!(inits, vec![4.0, 1.0, 4.0]);
        assert_eq!(l[0].1, LinkMode::Squeeze);
        assert_eq!(l[2].1, LinkMode::Expand);
        assert!(matches!(frag.first(), Some(Layer::ResidualBegin)));
        match frag.last() {
            Some(Layer::ResidualJoin(j)) => assert!(j.shortcut.is_empty()),
            other => panic!("expected join, got {other:?}"),
        }
    }

    #[test]
    fn bottleneck_downsample_pools_reducing_link() {
        let frag = build_el_bottleneck::<f32>("b", 64, 32, 128, true, &Toggles::default()).unwrap();
        let l = links(&frag);
        assert_eq!(
            l.iter().map(|x| x.3).collect::<Vec<_>>(),
            vec![true, false, false]
        );
        let g = LayerGraph::new((64, 8, 8), frag).unwrap();
        assert_eq!(g.output_shape(2).unwrap(), Shape4::new(2, 128, 4, 4));
    }

    #[test]
    fn bottleneck_without_residual_has_no_markers() {
        let t = Toggles::ablation_row("el4").unwrap();
        let frag = build_el_bottleneck::<f32>("b", 64, 16, 64, false, &t).unwrap();
        assert!(frag
            .iter()
            .all(|l| !matches!(l, Layer::ResidualBegin | Layer::ResidualJoin(_))));
        assert_eq!(frag.len(), 3);
    }

    #[test]
    fn bottleneck_k_only_on_reduce() {
        let frag = build_el_bottleneck::<f32>("b", 64, 16, 64, false, &Toggles::default()).unwrap();
        let g = LayerGraph::new((64, 4, 4), frag).unwrap();
        let modes: Vec<ScaleMode> = g
            .binary_layers()
            .iter()
            .map(|b| b.spec.scale_mode)
            .collect();
        assert_eq!(
            modes,
            vec![
                ScaleMode::AlphaAndK,
                ScaleMode::AlphaOnly,
                ScaleMode::AlphaOnly
            ]
        );
    }

    #[test]
    fn mobilenet_block_links() {
        let t = Toggles::default();
        let l = links(&build_el_mobilenet_block::<f32>("m", 64, 128, 1, &t).unwrap());
        assert_eq!((l[0].1, l[0].2), (LinkMode::Identity, 1.0));
        assert_eq!((l[1].1, l[1].2), (LinkMode::Expand, 2.0));
        let l = links(&build_el_mobilenet_block::<f32>("m", 32, 32, 1, &t).unwrap());
        assert!(l.iter().all(|x| x.1 == LinkMode::Identity));
        let frag = build_el_mobilenet_block::<f32>("m", 8, 16, 2, &t).unwrap();
        let l = links(&frag);
        assert!(l[0].3 && !l[1].3);
        let g = LayerGraph::new((8, 6, 6), frag).unwrap();
        assert_eq!(g.output_shape(1).unwrap(), Shape4::new(1, 16, 3, 3));
        let scales: Vec<ScaleMode> = g
            .binary_layers()
            .iter()
            .map(|b| b.spec.scale_mode)
            .collect();
        assert_eq!(scales, vec![ScaleMode::AlphaOnly; 2]);
    }

    #[test]
    fn basic_block_links_are_identity() {
        let g = build_network::<f32>(&ArchSpec::tiny(Family::BasicBlockTiny)).unwrap();
        let l = g.binary_layers();
        assert_eq!(l.len(), 8);
        assert!(l
            .iter()
            .all(|b| b.link.as_ref().unwrap().mode() == LinkMode::Identity));
    }

    #[test]
    fn tiny_bottleneck_traces_to_logits() {
        let arch = ArchSpec::tiny(Family::ElBottleneckTiny);
        let g = build_network::<f32>(&arch).unwrap();
        assert_eq!(g.output_shape(3).unwrap(), Shape4::new(3, 10, 1, 1));
        let blocks = g
            .binary_layers()
            .iter()
            .filter(|b| b.role == ConvRole::Reduce)
            .count();
        assert_eq!(blocks, 4);
        let trace = g.trace_shapes(1).unwrap();
        assert_eq!(trace.first().unwrap().output, Shape4::new(1, 64, 32, 32));
    }

    #[test]
    fn every_ablation_row_closes_for_every_tiny_family() {
        for fam in [
            Family::ElBottleneckTiny,
            Family::BasicBlockTiny,
            Family::ElMobilenetTiny,
        ] {
            for row in Toggles::ROWS {
                let arch = ArchSpec {
                    width: 4,
                    input_size: 8,
                    ..ArchSpec::tiny(fam).with_toggles(Toggles::ablation_row(row).unwrap())
                };
                let mut g = build_initialized::<f32>(&arch, 1).unwrap();
                let x = Tensor::from_fn(Shape4::new(2, 3, 8, 8), |n, c, y, x| {
                    ((n + c * 3 + y * 5 + x) as f32).sin()
                });
                let y = g.forward(x, &Mode::train()).unwrap();
                assert_eq!(y.shape(), Shape4::new(2, 10, 1, 1), "{fam} {row}");
            }
        }
    }

    #[test]
    fn baseline_row_has_no_links() {
        let arch = ArchSpec::tiny(Family::ElBottleneckTiny)
            .with_toggles(Toggles::ablation_row("baseline").unwrap());
        let g = build_network::<f32>(&arch).unwrap();
        assert!(g.binary_layers().iter().all(|b| b.link.is_none()));
        assert!(g.layers.iter().any(|l| matches!(l, Layer::ResidualJoin(_))));
    }

    #[test]
    fn real_weights_only_in_stem_shortcuts_and_classifier() {
        for fam in [
            Family::ElBottleneckTiny,
            Family::BasicBlockTiny,
            Family::ElMobilenetTiny,
        ] {
            let arch = ArchSpec::tiny(fam).with_toggles(Toggles::ablation_row("baseline").unwrap());
            let g = build_network::<f32>(&arch).unwrap();
            for l in g.real_weight_layers() {
                let name = l.name();
                assert!(
                    name == "stem.conv" || name == "head.fc" || name.ends_with(".shortcut.conv"),
                    "{fam}: unexpected real layer {name}"
                );
            }
            assert!(matches!(g.layers.first(), Some(Layer::FpConv(_))));
            assert!(matches!(g.layers.last(), Some(Layer::Linear(_))));
        }
    }

    #[test]
    fn unknown_family_is_config_error() {
        assert!(matches!(
            "vgg".parse::<Family>(),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn flops_of_single_conv() {
        let spec = ConvSpec::new(64, 64, 1, 1, 0);
        let fp = LayerGraph::<f32>::new(
            (64, 56, 56),
            vec![Layer::FpConv(layers::FpConv::new("c", spec).unwrap())],
        )
        .unwrap();
        let r = flops_count(&fp).unwrap();
        assert_eq!(r.real_ops(), 64 * 64 * 56 * 56 * 2);
        let bin = LayerGraph::<f32>::new(
            (64, 56, 56),
            vec![Layer::BinConv(Box::new(
                BinConvLayer::new("c", ConvRole::Spatial, spec).unwrap(),
            ))],
        )
        .unwrap();
        let rb = flops_count(&bin).unwrap();
        assert_eq!(rb.binary_ops(), 64 * 64 * 56 * 56);
        assert_eq!(rb.total(), (64 * 64 * 56 * 56) as f64 / 64.0);
        assert!(r.render().contains("binary ops / 64"));
    }

    #[test]
    fn flops_total_is_order_independent() {
        let g = build_network::<f32>(&ArchSpec::tiny(Family::ElBottleneckTiny)).unwrap();
        let r = flops_count(&g).unwrap();
        let mut rev = r.clone();
        rev.layers.reverse();
        assert_eq!(r.total(), rev.total());
        let sum: f64 = r.layers.iter().map(|l| l.total()).sum();
        assert!((sum - r.total()).abs() < 1e-6 * r.total());
    }

    #[test]
    fn resnet50_link_overhead() {
        let o = el_overhead(&ArchSpec::full_scale(Family::ElResnet50)).unwrap();
        eprintln!(
            "with {:.3e} without {:.3e} ratio {:.4}",
            o.with_links,
            o.without_links,
            o.ratio()
        );
        assert!(o.ratio() > 0.021 && o.ratio() < 0.031);
        assert!((o.extra() - 8e6).abs() < 0.2 * 8e6);
        assert!((o.without_links - 300e6).abs() < 0.2 * 300e6);
    }

    #[test]
    fn fresh_gamma_dump_is_unchanged() {
        let g = build_initialized::<f32>(&ArchSpec::tiny(Family::ElBottleneckTiny), 3).unwrap();
        let d = dump_gamma(&g);
        assert_eq!(d.len(), 12);
        assert!(d
            .iter()
            .all(|e| e.gamma == e.gamma_init && e.change() == Change::Unchanged));
        assert!(render_gamma_table(&d).contains("increased 0 decreased 0"));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let arch = ArchSpec {
            width: 4,
            ..ArchSpec::tiny(Family::ElBottleneckTiny)
        };
        let mut g = build_initialized::<f32>(&arch, 9).unwrap();
        let state = g.state_dict();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &state).unwrap();
        assert_eq!(&bytes[..4], b"ELBN");
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, state);
        let mut h = build_initialized::<f32>(&arch, 10).unwrap();
        h.load_state_dict(&back).unwrap();
        let a: Vec<u32> = g
            .state_dict()
            .iter()
            .flat_map(|e| e.data.iter().map(|v| v.to_bits()))
            .collect();
        let b: Vec<u32> = h
            .state_dict()
            .iter()
            .flat_map(|e| e.data.iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_other_graphs_and_corruption() {
        let small = ArchSpec {
            width: 4,
            ..ArchSpec::tiny(Family::ElBottleneckTiny)
        };
        let big = ArchSpec {
            width: 8,
            ..small.clone()
        };
        let state = build_network::<f32>(&small).unwrap().state_dict();
        assert!(build_network::<f32>(&big)
            .unwrap()
            .load_state_dict(&state)
            .is_err());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &state).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(read_checkpoint(&bytes[..]).is_err());
    }
}
