use crate::commands::train::resolve_dataset_dir;
use crate::opts::{
    default_out, flag, parse_flags, require_exists, usage_text, CliError, CliResult, FlagSpec,
    Resolved,
};
use atwb_core::attack::{pgd_linf_offset, AttackConfig};
use atwb_core::data::container::{save_container, Entry};
use atwb_core::data::pgm::{encode_pgm, GrayImage};
use atwb_core::data::{load_dataset, Dataset};
use atwb_core::explain::{difference_map, grad_cam, saliency_overlap, upsample_map, ActivationMap};
use atwb_core::model::load_model;
use atwb_core::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const SPECS: &[FlagSpec] = &[
    flag("model", "trained model container"),
    flag("data", "dataset directory (root or direct)"),
    flag("images", "indices, e.g. 0,3,9 or ranges 0-7 (default 0-7)"),
    flag(
        "eps",
        "perturbation radius for the difference maps (default 0.01)",
    ),
    flag("steps", "PGD iterations (default 40)"),
    flag("seed", "attack seed (default 0)"),
    flag("target-layer", "Grad-CAM layer (default stage3.out)"),
    flag("split", "train | test (default test)"),
    flag("out-dir", "output directory (default explain)"),
];

/// "0,3,9" and "0-7" forms, mixed.
pub fn parse_indices(text: &str) -> CliResult<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (usize, usize) = (
                a.parse()
                    .map_err(|_| CliError::Usage(format!("--images: bad index {a:?}")))?,
                b.parse()
                    .map_err(|_| CliError::Usage(format!("--images: bad index {b:?}")))?,
            );
            if b < a {
                return Err(CliError::Usage(format!("--images: empty range {part:?}")));
            }
            out.extend(a..=b);
        } else {
            out.push(
                part.parse()
                    .map_err(|_| CliError::Usage(format!("--images: bad index {part:?}")))?,
            );
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("--images: no indices given".into()));
    }
    Ok(out)
}

fn cam_to_pgm(map: &ActivationMap<f32>, h: usize, w: usize) -> CliResult<Vec<u8>> {
    let up = upsample_map(map, h, w)?;
    let img = GrayImage::new(w, h, up.to_gray()).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(encode_pgm(&img))
}

pub fn run(argv: &[String]) -> CliResult<()> {
    let Some(cli) = parse_flags("explain", argv, SPECS)? else {
        eprint!(
            "{}",
            usage_text(
                "explain",
                "Grad-CAM and perturbation difference maps",
                SPECS
            )
        );
        return Ok(());
    };
    let mut opts = Resolved::merge("explain", cli, SPECS)?;
    let model_path = opts.take_required("model")?;
    let data_dir = opts.take_required("data")?;
    let indices = parse_indices(&opts.take_string("images", "0-7"))?;
    let eps: f64 = opts.take("eps", 0.01f64)?;
    let steps: usize = opts.take("steps", 40usize)?;
    let seed: u64 = opts.take("seed", 0u64)?;
    let layer = opts.take_string("target-layer", "stage3.out");
    let split = opts.take_string("split", "test");
    let out_dir = opts.take_string("out-dir", &default_out("explain"));

    require_exists(&model_path, "model container")?;
    let split_dir = resolve_dataset_dir(&data_dir, &split);
    require_exists(&split_dir.display().to_string(), "dataset directory")?;

    let model = load_model::<f32>(&model_path)?;
    let dataset: Dataset<f32> = load_dataset(&split_dir)?;
    for &i in &indices {
        if i >= dataset.len() {
            return Err(CliError::Usage(format!(
                "--images: index {i} out of range for {} images",
                dataset.len()
            )));
        }
    }
    let head = model.head_kind().as_str();
    let dir = Path::new(&out_dir);
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{out_dir}: {e}")))?;

    let shape = dataset.images.shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let cfg = AttackConfig {
        epsilon: eps,
        steps,
        step_size: None,
        random_start: true,
        bounds: (0.0, 1.0),
        seed,
    };

    let mut float_entries: Vec<Entry> = Vec::new();
    let mut overlap_csv = String::from("index,epsilon,overlap\n");
    let mut any_mask = false;

    for &idx in &indices {
        let image = dataset.image(idx);
        let label = dataset.labels[idx];
        let batch = Tensor::from_vec(&[1, shape[1], h, w], image.data().to_vec())
            .map_err(crate::opts::CliError::from)?;
        let result = pgd_linf_offset(&model, &batch, &[label], &cfg, idx as u64)?;
        let adversarial = result.adversarial.index_axis0(0);

        // maps are taken for the true class so clean/adversarial pairs and
        // heads stay comparable
        let cam_clean = grad_cam(&model, &image, label, &layer)?;
        let cam_adv = grad_cam(&model, &adversarial, label, &layer)?;
        let diff = difference_map(&image, &adversarial)?;

        let tag = format!("i{idx}_eps{eps}_{head}");
        std::fs::write(
            dir.join(format!("cam_clean_{tag}.pgm")),
            cam_to_pgm(&cam_clean, h, w)?,
        )
        .map_err(|e| CliError::Runtime(format!("cam_clean_{tag}.pgm: {e}")))?;
        std::fs::write(
            dir.join(format!("cam_adv_{tag}.pgm")),
            cam_to_pgm(&cam_adv, h, w)?,
        )
        .map_err(|e| CliError::Runtime(format!("cam_adv_{tag}.pgm: {e}")))?;
        let diff_img =
            GrayImage::new(w, h, diff.to_gray()).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(dir.join(format!("diff_{tag}.pgm")), encode_pgm(&diff_img))
            .map_err(|e| CliError::Runtime(format!("diff_{tag}.pgm: {e}")))?;

        float_entries.push(Entry {
            name: format!("cam_clean/{tag}"),
            shape: vec![cam_clean.h, cam_clean.w],
            data: atwb_core::data::container::EntryData::F32(cam_clean.values.clone()),
        });
        float_entries.push(Entry {
            name: format!("cam_adv/{tag}"),
            shape: vec![cam_adv.h, cam_adv.w],
            data: atwb_core::data::container::EntryData::F32(cam_adv.values.clone()),
        });
        float_entries.push(Entry::from_tensor(
            format!("diff/{tag}"),
            &diff.perturbation,
        ));

        if let Some(masks) = &dataset.masks {
            let overlap = saliency_overlap(&diff, masks.mask_for(idx), h, w)?;
            overlap_csv.push_str(&format!("{idx},{eps},{overlap:.6}\n"));
            any_mask = true;
        }
        eprintln!(
            "explain: image {idx} done (success = {})",
            result.success[0]
        );
    }

    save_container(&float_entries, dir.join("maps.atwb"))?;
    if any_mask {
        std::fs::write(dir.join("overlap.csv"), overlap_csv)
            .map_err(|e| CliError::Runtime(format!("overlap.csv: {e}")))?;
    }
    opts.write_beside(dir.join("run.config"), &BTreeMap::new())?;
    eprintln!("explain: wrote {}", dir.display());
    Ok(())
}
