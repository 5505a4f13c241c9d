//! Diagnostic probes, not part of the regular suite (run with --ignored).

use frustumfield::config::ModelConfig;
use frustumfield::geometry::CameraView;
use frustumfield::model::Model;
use frustumfield::nn::{Adam, ParamGroup};
use frustumfield::render;
use frustumfield::scene::synth::{synth_scene, Preset};
use frustumfield::scene::load_scene;
use frustumfield::train::{loss, psnr};

#[test]
#[ignore]
fn single_image_overfit_probe() {
    let dir = tempfile::tempdir().unwrap();
    synth_scene(Preset::Sphere, 5, 12.0, 32, 32, 256, dir.path()).unwrap();
    let scene = load_scene::<f32>(dir.path()).unwrap();
    let inputs: Vec<CameraView<f32>> = vec![
        scene.views[1].clone(),
        scene.views[2].clone(),
        scene.views[3].clone(),
    ];
    let mut target = scene.views[0].clone();
    let gt = target.image.take().unwrap();

    let cfg = ModelConfig::toy();
    let model = Model::<f32>::new(&cfg, 3).unwrap();
    let mut opt = Adam::new(vec![
        ParamGroup { lr: 5e-5, params: model.encoder_params() },
        ParamGroup { lr: 5e-4, params: model.decoder_params() },
    ]);
    for step in 0..400 {
        let pred = render::render_coarse(&model, &inputs, &target).unwrap().out.rgb;
        let l = loss(&pred, &gt, 1.0, 0.5).unwrap();
        if step % 50 == 0 || step == 399 {
            println!(
                "step {step:4}  loss {:.5}  psnr {:.2}",
                l.item(),
                psnr(&pred, &gt)
            );
        }
        opt.zero_grad();
        l.backward();
        opt.step();
    }
}
