use std::fs;

use gpm_core::data::{
    format_token_line, load_cloud, load_dataset_dir, normalize_unit_sphere, parse_token_dump, parse_xyz, project_to_panel,
    render_svg, sample_n, synth_cloud, synth_dataset, write_cloud, CloudFormat, ShapeFamily, SyntheticShapeSpec,
};
use gpm_core::geometry::PointCloud;
use gpm_core::GpmError;

#[test]
fn synthetic_clouds_are_normalized_and_reproducible() {
    for family in ShapeFamily::ALL {
        let spec = SyntheticShapeSpec::new(family, 256, 5);
        let a = synth_cloud(&spec, 3).unwrap();
        assert_eq!(a, synth_cloud(&spec, 3).unwrap());
        assert_ne!(a, synth_cloud(&spec, 4).unwrap());
        assert_eq!(a.len(), 256);
        let max = a.points().iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        for d in 0..3 {
            let mean = a.points().iter().map(|p| p[d]).sum::<f64>() / 256.0;
            assert!(mean.abs() < 1e-12);
        }
    }
}

#[test]
fn synthetic_dataset_labels_follow_specs() {
    let specs: Vec<_> = ShapeFamily::ALL[..3].iter().map(|f| SyntheticShapeSpec::new(*f, 64, 1)).collect();
    let data = synth_dataset(&specs, 4).unwrap();
    assert_eq!(data.len(), 12);
    assert_eq!(data.num_classes(), 3);
    assert_eq!(data.indices_by_class(), vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10, 11]]);
    assert_eq!(data.class_names().unwrap()[0], ShapeFamily::ALL[0].name());
}

#[test]
fn normalizing_a_single_point_gives_the_origin() {
    let c = normalize_unit_sphere(&PointCloud::new(vec![[3.0, -2.0, 1.0]]).unwrap());
    assert_eq!(c.points(), &[[0.0, 0.0, 0.0]]);
}

#[test]
fn resampling_up_keeps_every_point() {
    let c = PointCloud::new((0..5).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
    let up = sample_n(&c, 12, 3).unwrap();
    assert_eq!(&up.points()[..5], c.points());
    let down = sample_n(&c, 3, 3).unwrap();
    let mut xs: Vec<i64> = down.points().iter().map(|p| p[0] as i64).collect();
    xs.sort_unstable();
    xs.dedup();
    assert_eq!(xs.len(), 3);
    assert!(sample_n(&c, 0, 3).is_err());
}

#[test]
fn xyz_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticShapeSpec::new(ShapeFamily::ALL[2], 100, 9);
    let cloud = synth_cloud(&spec, 0).unwrap();
    let path = dir.path().join("c.xyz");
    write_cloud(&path, &cloud).unwrap();
    assert_eq!(load_cloud(&path, CloudFormat::Xyz).unwrap(), cloud);
}

#[test]
fn malformed_xyz_names_the_line() {
    let err = parse_xyz("0 0 0\n1 2\n", "bad.xyz").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("bad.xyz") && msg.contains('2'), "{msg}");
    assert!(parse_xyz("0 0 nan\n", "n.xyz").is_err());
}

#[test]
fn directory_layout_defines_classes() {
    let dir = tempfile::tempdir().unwrap();
    for (class, n) in [("b_chairs", 2), ("a_cups", 1)] {
        fs::create_dir(dir.path().join(class)).unwrap();
        for i in 0..n {
            fs::write(dir.path().join(class).join(format!("{i}.xyz")), "0 0 0\n1 0 0\n").unwrap();
        }
    }
    fs::write(
        dir.path().join("a_cups").join("p.ply"),
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n",
    )
    .unwrap();
    fs::write(dir.path().join("a_cups").join("notes.md"), "ignored").unwrap();
    let data = load_dataset_dir(dir.path()).unwrap();
    assert_eq!(data.class_names().unwrap(), &["a_cups".to_string(), "b_chairs".to_string()]);
    let ids: Vec<_> = data.items().iter().map(|i| (i.id.as_str(), i.label)).collect();
    assert_eq!(ids, vec![("a_cups/0", Some(0)), ("a_cups/p", Some(0)), ("b_chairs/0", Some(1)), ("b_chairs/1", Some(1))]);
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset_dir(empty.path()), Err(GpmError::Data(_))));
}

#[test]
fn svg_has_three_panels_with_points_in_place() {
    let pts = vec![[0.0, 0.0, 0.0], [0.5, -0.5, 0.25]];
    let svg = render_svg(&pts).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let panels: Vec<_> = doc.descendants().filter(|n| n.tag_name().name() == "g").collect();
    assert_eq!(panels.len(), 3);
    for (panel, g) in panels.iter().enumerate() {
        let circles: Vec<_> = g.children().filter(|n| n.tag_name().name() == "circle").collect();
        assert_eq!(circles.len(), 2);
        let axes = [(0, 1), (0, 2), (1, 2)][panel];
        let (x, y) = project_to_panel(panel, pts[1][axes.0], pts[1][axes.1]);
        let cx: f64 = circles[1].attribute("cx").unwrap().parse().unwrap();
        let cy: f64 = circles[1].attribute("cy").unwrap().parse().unwrap();
        assert!((cx - x).abs() < 1e-3 && (cy - y).abs() < 1e-3);
    }
    assert!(render_svg(&[]).is_err());
}

#[test]
fn token_dump_round_trips_and_validates_counts() {
    let text = [format_token_line("a", &[3, 0, 7]), format_token_line("b/c", &[1])].join("\n");
    let parsed = parse_token_dump(&text, "t.txt").unwrap();
    assert_eq!(parsed, vec![("a".to_string(), vec![3, 0, 7]), ("b/c".to_string(), vec![1])]);
    assert!(parse_token_dump("a 2 1\n", "t.txt").is_err());
}
