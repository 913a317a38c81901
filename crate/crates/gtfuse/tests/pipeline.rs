use std::collections::BTreeSet;

use gtfuse::compare::{compare_methods, parse_specs, render_table, NamedSpec};
use gtfuse::{export_string, ingest_str, run_pipeline, Error, Method, PipelineSpec, Strictness};
use gtfuse_core::localize::majority_size;
use gtfuse_core::synth::{random_image, ImageRecipe};
use gtfuse_core::{BBox, Category, Dataset, FusionPolicy, ImageRecord, InstanceLabel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FIXTURE: &str = include_str!("fixtures/three_annotators.json");

fn fixture() -> Dataset {
    ingest_str(FIXTURE, Strictness::Strict).unwrap().0
}

fn boxed(id: u64, who: &str, class: u32, r: [i64; 4]) -> InstanceLabel {
    InstanceLabel::new(id, who.into(), class, BBox::from_ints(r[0], r[1], r[2], r[3]).unwrap())
}

fn dataset(images: Vec<ImageRecord>, classes: u32) -> Dataset {
    let categories = (1..=classes).map(|id| Category { id, name: format!("c{id}") }).collect();
    let mut d = Dataset { images, categories, ..Default::default() };
    d.canonicalize();
    d.validate().unwrap();
    d
}

fn synthetic(seed: u64, images: usize, recipe: &ImageRecipe) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 1;
    let images = (0..images as u64)
        .map(|id| {
            let (im, n) = random_image(&mut rng, id, next, recipe).unwrap();
            next = n;
            im
        })
        .collect();
    let categories = (0..recipe.classes).map(|id| Category { id, name: format!("c{id}") }).collect();
    let mut d = Dataset { images, categories, ..Default::default() };
    d.canonicalize();
    d
}

#[test]
fn laem_average_produces_one_fused_file() {
    let d = fixture();
    let out = run_pipeline(&d, &PipelineSpec::new(Method::Laem)).unwrap();
    assert_eq!(out.report.method, "laem+average");
    let members: usize = out.dataset.labels().map(|l| l.provenance().unwrap().source_ids.len()).sum();
    assert_eq!(members + out.report.discarded, out.report.input_labels);
    for image in &out.dataset.images {
        let r = d.images.iter().find(|i| i.id == image.id).unwrap().annotator_count();
        assert!(image.labels_by_annotator.is_empty());
        for label in &image.fused {
            let p = label.provenance().unwrap();
            let distinct: BTreeSet<_> = p.annotator_ids.iter().collect();
            assert_eq!(distinct.len(), p.source_ids.len());
            assert!(p.source_ids.len() >= majority_size(r) && p.source_ids.len() <= r);
        }
    }
    let em = out.report.em.as_ref().unwrap();
    assert_eq!(em.annotators.len(), 3);
    assert!(em.objective.windows(2).all(|w| w[1] >= w[0] - 1e-9));
}

/// Annotators a and b are reliable, c is not. One image, seen only by a and
/// c, holds a single box on which they disagree.
fn tie_dataset() -> Dataset {
    let mut images = Vec::new();
    let mut next = 1;
    for i in 0..30u64 {
        let mut im = ImageRecord::new(i, 50, 50);
        let truth = 1 + (i % 2) as u32;
        let wrong = 3 - truth;
        for (who, class) in [("a", truth), ("b", truth), ("c", if i % 5 == 0 { truth } else { wrong })] {
            im.push_label(boxed(next, who, class, [10, 10, 30, 30]));
            next += 1;
        }
        images.push(im);
    }
    let mut tie = ImageRecord::new(100, 50, 50);
    tie.push_label(boxed(next, "a", 1, [5, 5, 20, 20]));
    tie.push_label(boxed(next + 1, "c", 2, [5, 5, 20, 21]));
    images.push(tie);
    dataset(images, 2)
}

fn class_on_tie_image(out: &gtfuse::PipelineOutput) -> u32 {
    let image = out.dataset.images.iter().find(|i| i.id == 100).unwrap();
    assert_eq!(image.fused.len(), 1);
    image.fused[0].category_id
}

#[test]
fn mjv_ties_follow_the_seed_and_laem_ties_follow_confidence() {
    let d = tie_dataset();
    let mut mjv_classes = BTreeSet::new();
    let mut laem_classes = BTreeSet::new();
    for seed in 0..16 {
        let mjv = run_pipeline(&d, &PipelineSpec { seed, ..PipelineSpec::new(Method::Mjv) }).unwrap();
        assert_eq!(mjv.report.ties, 1);
        mjv_classes.insert(class_on_tie_image(&mjv));
        let laem = run_pipeline(&d, &PipelineSpec { seed, ..PipelineSpec::new(Method::Laem) }).unwrap();
        laem_classes.insert(class_on_tie_image(&laem));
    }
    assert_eq!(mjv_classes, BTreeSet::from([1, 2]));
    assert_eq!(laem_classes, BTreeSet::from([1]));
}

#[test]
fn every_tied_row_is_reported_once() {
    let mut images = tie_dataset().images;
    let mut im = ImageRecord::new(101, 50, 50);
    for (k, y) in [0, 25].into_iter().enumerate() {
        let id = 500 + 2 * k as u64;
        im.push_label(boxed(id, "a", 1, [5, y, 20, y + 15]));
        im.push_label(boxed(id + 1, "c", 2, [5, y, 20, y + 15]));
    }
    images.push(im);
    let out = run_pipeline(&dataset(images, 2), &PipelineSpec::new(Method::Mjv)).unwrap();
    let tied: Vec<u64> = out.dataset.images.iter().filter(|i| i.id >= 100).flat_map(|i| i.fused.iter().map(|l| l.id)).collect();
    assert_eq!(out.report.tied_label_ids, tied);
    assert_eq!(out.report.ties, 3);
}

#[test]
fn output_does_not_depend_on_image_order() {
    let d = synthetic(3, 60, &ImageRecipe::default());
    let mut shuffled = d.clone();
    shuffled.images.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    for method in [Method::Laem, Method::Mjv, Method::Wbf, Method::WbfEm] {
        let spec = PipelineSpec { seed: 5, ..PipelineSpec::new(method) };
        let a = export_string(&run_pipeline(&d, &spec).unwrap().dataset).unwrap();
        let b = export_string(&run_pipeline(&shuffled, &spec).unwrap().dataset).unwrap();
        assert_eq!(a, b, "{method}");
    }
}

#[test]
fn too_many_annotators_is_infeasible_before_any_work() {
    let mut im = ImageRecord::new(1, 40, 40);
    for (i, who) in ["a", "b", "c", "d", "e", "f", "g"].iter().enumerate() {
        im.push_label(boxed(i as u64 + 1, who, 1, [1, 1, 9, 9]));
    }
    let d = dataset(vec![im], 1);
    let err = run_pipeline(&d, &PipelineSpec::new(Method::Laem)).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(run_pipeline(&d, &PipelineSpec::new(Method::Wbf)).is_ok());
    let wide = PipelineSpec { max_annotators: 7, ..PipelineSpec::new(Method::Mjv) };
    assert_eq!(run_pipeline(&d, &wide).unwrap().report.output_labels, 1);
}

#[test]
fn fusion_is_rejected_for_wbf() {
    let spec = PipelineSpec { fusion: Some(FusionPolicy::Union), ..PipelineSpec::new(Method::Wbf) };
    let err = spec.validate().unwrap_err();
    assert!(matches!(err, Error::Core(gtfuse_core::Error::Config(_))));
    assert_eq!(err.exit_code(), 2);
}

fn named(name: &str, spec: PipelineSpec) -> NamedSpec {
    NamedSpec { name: name.into(), spec }
}

#[test]
fn identical_specs_compare_to_zero_difference() {
    let d = synthetic(17, 40, &ImageRecipe::default());
    let cmp = compare_methods(&d, &[named("x", PipelineSpec::new(Method::Laem)), named("y", PipelineSpec::new(Method::Laem))]).unwrap();
    let p = &cmp.pairs[0];
    assert_eq!(p.instance_difference, 0);
    assert_eq!(p.shared_groups, cmp.methods[0].instances);
    assert_eq!(p.class_agreement, p.shared_groups);
    assert_eq!(p.mean_iou, Some(1.0));
    assert_eq!(p.area_a_le_b, p.shared_groups);
    assert_eq!(p.area_a_ge_b, p.shared_groups);
    assert_eq!(cmp.methods[0].class_histogram, cmp.methods[1].class_histogram);
    assert!(cmp.per_image.iter().all(|c| c.instances[0] == c.instances[1]));
}

#[test]
fn intersection_areas_never_exceed_union_areas() {
    let d = synthetic(23, 80, &ImageRecipe::default());
    let inter = PipelineSpec { fusion: Some(FusionPolicy::Intersection), ..PipelineSpec::new(Method::Mjv) };
    let union = PipelineSpec { fusion: Some(FusionPolicy::Union), ..PipelineSpec::new(Method::Laem) };
    let cmp = compare_methods(&d, &[named("mjv+intersection", inter), named("laem+union", union)]).unwrap();
    let p = &cmp.pairs[0];
    assert!(p.shared_groups > 0);
    assert_eq!(p.area_a_le_b, p.shared_groups);
    assert!(render_table(&cmp).contains("mjv+intersection"));
}

#[test]
fn wbf_keeps_what_laem_discards() {
    let recipe = ImageRecipe { class_agreement: 0.5, jitter: 6, spurious: 0.6, ..ImageRecipe::default() };
    let d = synthetic(31, 60, &recipe);
    let cmp = compare_methods(&d, &[named("laem", PipelineSpec::new(Method::Laem)), named("wbf", PipelineSpec::new(Method::Wbf))]).unwrap();
    assert!(cmp.per_image.iter().all(|c| c.instances[1] >= c.instances[0]));
    assert!(cmp.pairs[0].instance_difference > 0);
    assert_eq!(cmp.methods[1].discarded, 0);
}

#[test]
fn spec_files_parse_exact_thresholds() {
    let specs = parse_specs(
        r#"[{"name": "strict", "method": "laem", "fusion": "intersection", "theta": 0.7},
            {"method": "wbf-em", "wbf_threshold": 0.6, "seed": 4}]"#,
    )
    .unwrap();
    assert_eq!(specs[0].spec.theta, gtfuse_core::rational::ratio(7, 10));
    assert_eq!(specs[1].name, "wbf-em");
    assert_eq!(specs[1].spec.wbf_threshold, gtfuse_core::rational::ratio(3, 5));
    assert!(parse_specs(r#"[{"method": "wbf", "fusion": "union"}]"#).is_err());
    assert!(parse_specs(r#"[{"method": "nms"}]"#).is_err());
}

#[test]
fn wbf_em_downweights_unreliable_annotators() {
    // c disagrees with a and b on every class, so its box should pull less
    let mut images = tie_dataset().images;
    let mut im = ImageRecord::new(200, 60, 60);
    im.push_label(boxed(9001, "a", 1, [10, 10, 20, 20]));
    im.push_label(boxed(9002, "c", 1, [12, 10, 22, 20]));
    images.push(im);
    let d = dataset(images, 2);
    let plain = run_pipeline(&d, &PipelineSpec::new(Method::Wbf)).unwrap();
    let weighted = run_pipeline(&d, &PipelineSpec::new(Method::WbfEm)).unwrap();
    let x = |out: &gtfuse::PipelineOutput| {
        let im = out.dataset.images.iter().find(|i| i.id == 200).unwrap();
        assert_eq!(im.fused.len(), 1);
        im.fused[0].bbox.x_min().clone()
    };
    assert_eq!(x(&plain), gtfuse_core::rational::int(11));
    assert!(x(&weighted) < gtfuse_core::rational::int(11));
    let em = weighted.report.em.unwrap();
    assert!(em.annotators["a"].confidence > em.annotators["c"].confidence);
}
