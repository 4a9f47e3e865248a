// Python bindings for the crosscoder diffing library.

#include "xdiff/diffing.hpp"
#include "xdiff/io.hpp"
#include "xdiff/latent_scaling.hpp"
#include "xdiff/patching.hpp"
#include "xdiff/trainer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace xdiff;

PYBIND11_MODULE(_xdiff, m) {
    m.doc() = "L1/BatchTopK crosscoders, latent scaling and causal patching on "
              "synthetic paired-activation worlds";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
    py::register_exception<VariantError>(m, "VariantError", PyExc_ValueError);
    py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

    py::enum_<PlantedClass>(m, "PlantedClass")
        .value("SHARED", PlantedClass::Shared)
        .value("BASE_ONLY", PlantedClass::BaseOnly)
        .value("CHAT_ONLY", PlantedClass::ChatOnly)
        .value("DECOUPLING_PROBE", PlantedClass::DecouplingProbe);

    py::class_<WorldConfig>(m, "WorldConfig")
        .def(py::init<>())
        .def_readwrite("d", &WorldConfig::d)
        .def_readwrite("vocab", &WorldConfig::vocab)
        .def_readwrite("n_shared", &WorldConfig::n_shared)
        .def_readwrite("n_base_only", &WorldConfig::n_base_only)
        .def_readwrite("n_chat_only", &WorldConfig::n_chat_only)
        .def_readwrite("n_decoupling_probe", &WorldConfig::n_decoupling_probe)
        .def_readwrite("fire_prob", &WorldConfig::fire_prob)
        .def_readwrite("scale_base", &WorldConfig::scale_base)
        .def_readwrite("scale_chat", &WorldConfig::scale_chat)
        .def_readwrite("shared_fire_prob", &WorldConfig::shared_fire_prob)
        .def_readwrite("base_excl_fire_prob", &WorldConfig::base_excl_fire_prob)
        .def_readwrite("chat_excl_fire_prob", &WorldConfig::chat_excl_fire_prob)
        .def_readwrite("noise_sigma", &WorldConfig::noise_sigma)
        .def_readwrite("seed", &WorldConfig::seed)
        .def_readwrite("template_stride", &WorldConfig::template_stride)
        .def_readwrite("max_pairwise_cosine", &WorldConfig::max_pairwise_cosine);

    py::class_<PlantedLatent>(m, "PlantedLatent")
        .def_readonly("direction_base", &PlantedLatent::direction_base)
        .def_readonly("direction_chat", &PlantedLatent::direction_chat)
        .def_readonly("cls", &PlantedLatent::cls)
        .def_readonly("fire_prob", &PlantedLatent::fire_prob)
        .def_readonly("scale_base", &PlantedLatent::scale_base)
        .def_readonly("scale_chat", &PlantedLatent::scale_chat);

    py::class_<AffineReadout>(m, "AffineReadout")
        .def_readonly("W", &AffineReadout::W)
        .def_readonly("b", &AffineReadout::b);

    py::class_<PlantedWorld>(m, "PlantedWorld")
        .def_readonly("latents", &PlantedWorld::latents)
        .def_readonly("d", &PlantedWorld::d)
        .def_readonly("noise_sigma", &PlantedWorld::noise_sigma)
        .def_readonly("seed", &PlantedWorld::seed)
        .def_readonly("readout_base", &PlantedWorld::readout_base)
        .def_readonly("readout_chat", &PlantedWorld::readout_chat)
        .def_property_readonly("n_latents", &PlantedWorld::n_latents)
        .def("__repr__", [](const PlantedWorld& w) {
            return "<PlantedWorld d=" + std::to_string(w.d) + " latents=" +
                   std::to_string(w.n_latents()) + ">";
        });

    py::class_<PairedActivationBatch>(m, "PairedActivationBatch")
        .def(py::init<>())
        .def_readwrite("h_base", &PairedActivationBatch::h_base)
        .def_readwrite("h_chat", &PairedActivationBatch::h_chat)
        .def_readwrite("codes_base", &PairedActivationBatch::codes_base)
        .def_readwrite("codes_chat", &PairedActivationBatch::codes_chat)
        .def_readwrite("template_mask", &PairedActivationBatch::template_mask)
        .def_property_readonly("n", &PairedActivationBatch::rows);

    m.def("generate_world", &generate_world, py::arg("config"));
    m.def("sample_batch", &sample_batch, py::arg("world"), py::arg("n"), py::arg("stream") = 0);
    m.def("toy_forward", &toy_forward, py::arg("readout"), py::arg("h"));

    py::enum_<VariantKind>(m, "VariantKind")
        .value("L1", VariantKind::L1)
        .value("BATCH_TOPK", VariantKind::BatchTopK);

    py::class_<Variant>(m, "Variant")
        .def_static("l1", &Variant::l1, py::arg("mu"))
        .def_static("batch_topk", &Variant::batch_topk, py::arg("k"), py::arg("k_aux") = 512,
                    py::arg("alpha") = 1.0 / 32.0)
        .def_readwrite("kind", &Variant::kind)
        .def_readwrite("mu", &Variant::mu)
        .def_readwrite("k", &Variant::k)
        .def_readwrite("k_aux", &Variant::k_aux)
        .def_readwrite("alpha", &Variant::alpha);

    py::class_<CrosscoderParams>(m, "CrosscoderParams")
        .def(py::init<>())
        .def_readwrite("D", &CrosscoderParams::D)
        .def_readwrite("d", &CrosscoderParams::d)
        .def_readwrite("enc_base", &CrosscoderParams::enc_base)
        .def_readwrite("enc_chat", &CrosscoderParams::enc_chat)
        .def_readwrite("b_enc", &CrosscoderParams::b_enc)
        .def_readwrite("dec_base", &CrosscoderParams::dec_base)
        .def_readwrite("dec_chat", &CrosscoderParams::dec_chat)
        .def_readwrite("b_dec_base", &CrosscoderParams::b_dec_base)
        .def_readwrite("b_dec_chat", &CrosscoderParams::b_dec_chat)
        .def_readwrite("variant", &CrosscoderParams::variant)
        .def_readwrite("theta", &CrosscoderParams::theta);

    py::class_<LatentCodes>(m, "LatentCodes")
        .def_readonly("f", &LatentCodes::f)
        .def_property_readonly("active",
                               [](const LatentCodes& c) { return c.active.cast<bool>().eval(); })
        .def("selected", &LatentCodes::selected);

    py::class_<LossBreakdown>(m, "LossBreakdown")
        .def_readonly("recon_base", &LossBreakdown::recon_base)
        .def_readonly("recon_chat", &LossBreakdown::recon_chat)
        .def_readonly("sparsity", &LossBreakdown::sparsity)
        .def_readonly("aux", &LossBreakdown::aux)
        .def_readonly("total", &LossBreakdown::total);

    m.def("encode", &encode, py::arg("params"), py::arg("batch"));
    m.def("encode_inference", &encode_inference, py::arg("params"), py::arg("batch"));
    m.def("inference_codes", &inference_codes, py::arg("params"), py::arg("batch"));
    m.def(
        "decode",
        [](const CrosscoderParams& p, const LatentCodes& c) { return decode(p, c); },
        py::arg("params"), py::arg("codes"));
    m.def("scaled_activation", &scaled_activation, py::arg("params"), py::arg("codes"));
    m.def(
        "batch_topk_select",
        [](const Matrix& v, int k) { return batch_topk_select(v, k).cast<bool>().eval(); },
        py::arg("v"), py::arg("k"));
    m.def("l1_loss", &l1_loss, py::arg("params"), py::arg("batch"));
    m.def("batchtopk_loss", &batchtopk_loss, py::arg("params"), py::arg("batch"),
          py::arg("dead_mask"));
    m.def("estimate_theta", &estimate_theta, py::arg("params"), py::arg("batches"));
    m.def("sparsity_penalties", &sparsity_penalties, py::arg("dec_base_j"), py::arg("dec_chat_j"),
          py::arg("f"));

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("variant", &TrainConfig::variant)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("adam_beta1", &TrainConfig::adam_beta1)
        .def_readwrite("adam_beta2", &TrainConfig::adam_beta2)
        .def_readwrite("adam_eps", &TrainConfig::adam_eps)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("steps", &TrainConfig::steps)
        .def_readwrite("dead_window", &TrainConfig::dead_window)
        .def_readwrite("mu_warmup_steps", &TrainConfig::mu_warmup_steps)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("init_scale", &TrainConfig::init_scale)
        .def_readwrite("dict_size", &TrainConfig::dict_size)
        .def_readwrite("expansion", &TrainConfig::expansion);

    py::class_<TrainStats>(m, "TrainStats")
        .def_readonly("fve_base", &TrainStats::fve_base)
        .def_readonly("fve_chat", &TrainStats::fve_chat)
        .def_readonly("fve_total", &TrainStats::fve_total)
        .def_readonly("l0_mean", &TrainStats::l0_mean)
        .def_readonly("dead_fraction", &TrainStats::dead_fraction)
        .def_readonly("loss_history", &TrainStats::loss_history);

    m.def("init_params", &init_params, py::arg("config"), py::arg("d"), py::arg("D"));
    m.def(
        "train",
        [](const PlantedWorld& world, const TrainConfig& config) { return train(world, config); },
        py::arg("world"), py::arg("config"),
        "Train a crosscoder on batches drawn from the world; returns (params, stats).");
    m.def("compute_stats", &compute_stats, py::arg("params"), py::arg("held_out"));
    m.def("held_out_batches", &held_out_batches, py::arg("world"), py::arg("n_batches"),
          py::arg("batch_size"));

    py::enum_<LatentClass>(m, "LatentClass")
        .value("BASE_ONLY", LatentClass::BaseOnly)
        .value("CHAT_ONLY", LatentClass::ChatOnly)
        .value("SHARED", LatentClass::Shared)
        .value("OTHER", LatentClass::Other)
        .value("DEAD", LatentClass::Dead);

    py::class_<LatentClassification>(m, "LatentClassification")
        .def_readonly("latent", &LatentClassification::latent)
        .def_readonly("delta_norm", &LatentClassification::delta_norm)
        .def_readonly("cls", &LatentClassification::cls)
        .def_readonly("freq", &LatentClassification::freq);

    py::class_<TwinPair>(m, "TwinPair")
        .def_readonly("chat_latent", &TwinPair::chat_latent)
        .def_readonly("base_latent", &TwinPair::base_latent)
        .def_readonly("cosine", &TwinPair::cosine)
        .def_readonly("divergence", &TwinPair::divergence);

    m.def(
        "delta_norm",
        [](const CrosscoderParams& p, int j) -> std::optional<double> { return delta_norm(p, j); },
        py::arg("params"), py::arg("j"));
    m.def("classify", &classify, py::arg("params"));
    m.def("classify_with_freq", &classify_with_freq, py::arg("params"), py::arg("batches"));
    m.def("twin_pairs", &twin_pairs, py::arg("params"), py::arg("classes"),
          py::arg("threshold") = 0.9);
    m.def("activation_divergence", &activation_divergence, py::arg("params"), py::arg("latent_i"),
          py::arg("latent_j"), py::arg("train_batches"), py::arg("val_batches"));
    m.def("frequency_stats", &frequency_stats, py::arg("params"), py::arg("batches"));

    py::enum_<TargetKind>(m, "TargetKind")
        .value("RECONSTRUCTION", TargetKind::Reconstruction)
        .value("ERROR", TargetKind::Error);
    py::enum_<ModelSide>(m, "ModelSide")
        .value("BASE", ModelSide::Base)
        .value("CHAT", ModelSide::Chat);

    py::class_<BetaQuadruple>(m, "BetaQuadruple")
        .def_readonly("latent", &BetaQuadruple::latent)
        .def_readonly("beta_r_base", &BetaQuadruple::beta_r_base)
        .def_readonly("beta_r_chat", &BetaQuadruple::beta_r_chat)
        .def_readonly("beta_eps_base", &BetaQuadruple::beta_eps_base)
        .def_readonly("beta_eps_chat", &BetaQuadruple::beta_eps_chat)
        .def_readonly("nu_r", &BetaQuadruple::nu_r)
        .def_readonly("nu_eps", &BetaQuadruple::nu_eps)
        .def_readonly("support", &BetaQuadruple::support)
        .def_readonly("negative_base_flag", &BetaQuadruple::negative_base_flag)
        .def_readonly("low_support_flag", &BetaQuadruple::low_support_flag)
        .def_readonly("ratio_undefined_flag", &BetaQuadruple::ratio_undefined_flag)
        .def_readonly("excluded", &BetaQuadruple::excluded);

    m.def("beta_closed_form", &beta_closed_form, py::arg("f"), py::arg("d"), py::arg("Y"));
    m.def("scaling_targets", &scaling_targets, py::arg("params"), py::arg("batch"), py::arg("j"),
          py::arg("kind"), py::arg("model"));
    m.def("latent_scaling_report", &latent_scaling_report, py::arg("params"), py::arg("batches"),
          py::arg("latent_set"));
    m.def("mse_improvement", &mse_improvement, py::arg("params"), py::arg("batches"), py::arg("j"),
          py::arg("model"), py::arg("kind"));
    m.def("rank_by_nu_sum", &rank_by_nu_sum, py::arg("report"));

    py::enum_<PatchMode>(m, "PatchMode")
        .value("NONE", PatchMode::None)
        .value("ALL", PatchMode::All)
        .value("ERROR", PatchMode::Error)
        .value("LATENT_SET", PatchMode::LatentSet)
        .value("TEMPLATE", PatchMode::Template);

    py::class_<PatchSpec>(m, "PatchSpec")
        .def_static("none", &PatchSpec::none)
        .def_static("all", &PatchSpec::all)
        .def_static("error", &PatchSpec::error)
        .def_static("latent_set", &PatchSpec::latent_set, py::arg("latents"),
                    py::arg("label") = "latent_set")
        .def_static("template_tokens", &PatchSpec::template_tokens)
        .def_readonly("mode", &PatchSpec::mode)
        .def_readonly("latents", &PatchSpec::latents)
        .def_readonly("label", &PatchSpec::label);

    py::class_<PatchResult>(m, "PatchResult")
        .def_readonly("label", &PatchResult::label)
        .def_readonly("kl_per_position", &PatchResult::kl_per_position)
        .def_readonly("kl_mean_all", &PatchResult::kl_mean_all)
        .def_readonly("kl_mean_first9", &PatchResult::kl_mean_first9)
        .def_readonly("n_positions", &PatchResult::n_positions);

    m.def("approximate", &approximate, py::arg("params"), py::arg("batch"), py::arg("spec"));
    m.def("kl_divergence", &kl_divergence, py::arg("p"), py::arg("q"));
    m.def("run_patch_experiment", &run_patch_experiment, py::arg("world"), py::arg("params"),
          py::arg("batches"), py::arg("specs"));
    m.def("latents_by_delta_norm", &latents_by_delta_norm, py::arg("params"));

    m.def("save_params", &save_params, py::arg("path"), py::arg("params"));
    m.def("load_params", &load_params, py::arg("path"));
    m.def("save_batch", &save_batch, py::arg("path"), py::arg("batch"));
    m.def("load_batch", &load_batch, py::arg("path"));

    m.attr("__version__") = "0.1.0";
}
