#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "ls4/bench.hpp"
#include "ls4/checkpoint.hpp"
#include "ls4/datagen.hpp"
#include "ls4/fft.hpp"
#include "ls4/metrics.hpp"
#include "ls4/ssm.hpp"
#include "ls4/vae.hpp"

namespace py = pybind11;
using namespace ls4;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    std::vector<double> v(a.data(), a.data() + a.size());
    return Tensor(std::move(shape), std::move(v));
}

Array to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    if (t.size()) std::memcpy(out.mutable_data(), t.data().data(), t.size() * sizeof(double));
    return out;
}

Array to_array(const std::vector<double>& v) { return to_array(Tensor::vector(v)); }

// Inputs of shape [S, L] are treated as one channel.
Tensor series(const Array& a) {
    Tensor t = to_tensor(a);
    if (t.rank() == 2) return t.reshaped(Shape{t.dim(0), t.dim(1), 1});
    if (t.rank() != 3) throw std::invalid_argument("expected an array of shape [S, L] or [S, L, C]");
    return t;
}

Tensor full_mask(const Tensor& x) { return Tensor(x.shape(), 1.0); }

net::ModelConfig model_config(const py::dict& d) {
    nlohmann::json j = nlohmann::json::object();
    for (auto item : d) {
        const auto key = py::cast<std::string>(item.first);
        py::handle v = item.second;
        if (py::isinstance<py::bool_>(v)) j[key] = py::cast<bool>(v);
        else if (py::isinstance<py::int_>(v)) j[key] = py::cast<std::size_t>(v);
        else j[key] = py::cast<double>(v);
    }
    return config_from_json(j);
}

py::dict config_dict(const net::ModelConfig& c) {
    py::dict d;
    d["H"] = c.H;
    d["N"] = c.N;
    d["latent_dim"] = c.latent_dim;
    d["num_layers1"] = c.num_layers1;
    d["num_layers2"] = c.num_layers2;
    d["x_dim"] = c.x_dim;
    d["sigma_x"] = c.sigma_x;
    d["decoder_uses_x"] = c.decoder_uses_x;
    d["delta"] = c.delta;
    return d;
}

struct Model {
    net::ModelConfig config;
    ParamStore params;
};

struct PyTrainer {
    vae::Trainer trainer;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "LS4 latent state-space models: core operations";

    // ---- numerics / ssm ----
    m.def("causal_conv", [](const Array& x, const Array& k) {
        const Tensor a = to_tensor(x), b = to_tensor(k);
        return to_array(causal_conv(a.data(), b.data()));
    }, py::arg("signal"), py::arg("kernel"), "FFT causal convolution of equal-length 1-D arrays.");

    m.def("hippo", [](std::size_t n) {
        const Eigen::MatrixXd a = ssm::hippo_legs(n);
        Tensor t(Shape{n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) t.at(i, j) = a(i, j);
        return to_array(t);
    }, py::arg("n"));

    m.def("ssm_forward", [](std::size_t n, std::size_t length, unsigned long long seed, double delta,
                            const std::string& mode) {
        const ssm::ContinuousSSM s = ssm::random_hippo_ssm(n, seed);
        const ssm::DiscreteSSM d = ssm::discretize_bilinear(s, delta);
        std::vector<double> x(length), z(length);
        std::mt19937_64 rng(seed + 1);
        std::normal_distribution<double> g;
        for (std::size_t i = 0; i < length; ++i) {
            x[i] = g(rng);
            z[i] = g(rng);
        }
        if (mode == "conv") return to_array(ssm::ssm_conv_forward(ssm::materialize_kernel(d, s.C, length), x, z, s.D, s.F));
        if (mode == "recurrent")
            return to_array(ssm::ssm_recurrent_forward(d, s.C, s.D, s.F, x, z, Eigen::VectorXd::Zero(n)).y);
        throw std::invalid_argument("mode must be conv or recurrent");
    }, py::arg("n"), py::arg("length"), py::arg("seed") = 0, py::arg("delta") = 1.0, py::arg("mode") = "conv",
       "Output of a random HiPPO SSM on random inputs, in either representation.");

    // ---- data ----
    m.def("flame", [](int p, std::size_t n, std::uint64_t seed, double t_end, std::size_t length) {
        data::FlameSpec spec;
        spec.p = p;
        spec.n_traj = n;
        spec.t_end = t_end;
        data::SeriesBatch b = data::flame_generate(spec, seed);
        if (length > 0) b = data::subsample_time(b, length);
        return to_array(b.values.reshaped(Shape{b.count(), b.length()}));
    }, py::arg("p") = 3, py::arg("n") = 100, py::arg("seed") = 0, py::arg("t_end") = 1000.0, py::arg("length") = 0);

    m.def("normalize_per_sequence", [](const Array& x) {
        const Tensor t = series(x);
        return to_array(data::normalize_per_sequence(data::make_batch(t)).values.reshaped(to_tensor(x).shape()));
    }, py::arg("x"));

    // ---- metrics ----
    m.def("crps", [](const Array& ensemble, const Array& target) {
        return metrics::crps(to_tensor(ensemble), to_tensor(target));
    }, py::arg("ensemble"), py::arg("target"));
    m.def("mse", [](const Array& pred, const Array& target) { return metrics::mse(to_tensor(pred), to_tensor(target)); });
    m.def("marginal_score", [](const Array& real, const Array& gen, std::size_t bins, bool pooled) {
        return metrics::marginal_score(series(real), series(gen), bins,
                                       pooled ? metrics::MarginalMode::pooled : metrics::MarginalMode::per_step);
    }, py::arg("real"), py::arg("gen"), py::arg("bins") = 50, py::arg("pooled") = false);
    m.def("kl_gauss", [](double mq, double sq, double mp, double sp) {
        ad::Tape t;
        auto c = [&](double v) { return t.constant(Tensor(Shape{1, 1, 1}, v)); };
        return vae::kl_diag_gauss(c(mq), c(sq), c(mp), c(sp)).value().item();
    }, py::arg("mu_q"), py::arg("sigma_q"), py::arg("mu_p"), py::arg("sigma_p"));

    // ---- model ----
    py::class_<Model>(m, "Model")
        .def(py::init([](const py::dict& cfg, std::uint64_t seed) {
            Model md{model_config(cfg), {}};
            md.params = net::init_model(md.config, seed);
            return md;
        }), py::arg("config") = py::dict(), py::arg("seed") = 0)
        .def_static("load", [](const std::string& path, bool ema) {
            const Checkpoint ck = load_checkpoint(path);
            return Model{ck.config, vae::checkpoint_params(ck, ema)};
        }, py::arg("path"), py::arg("ema") = true)
        .def_property_readonly("config", [](const Model& md) { return config_dict(md.config); })
        .def_property_readonly("num_parameters", [](const Model& md) { return md.params.total_values(); })
        .def("elbo", [](const Model& md, const Array& x, std::uint64_t seed) {
            const Tensor t = series(x);
            std::mt19937_64 rng(seed);
            const Tensor eps = vae::standard_normal(Shape{t.dim(0), t.dim(1), md.config.latent_dim}, rng);
            const auto r = vae::elbo(md.params, md.config, t, full_mask(t), eps);
            return py::dict(py::arg("recon") = r.recon, py::arg("kl") = r.kl, py::arg("elbo") = r.elbo);
        }, py::arg("x"), py::arg("seed") = 0)
        .def("generate", [](const Model& md, std::size_t n, std::size_t length, std::uint64_t seed) {
            return to_array(vae::generate(md.params, md.config, n, length, seed).x);
        }, py::arg("n"), py::arg("length"), py::arg("seed") = 0)
        .def("extrapolate", [](const Model& md, const Array& first, std::size_t horizon, std::size_t samples,
                               std::uint64_t seed) {
            const auto ex = vae::extrapolate(md.params, md.config, series(first), horizon, samples, seed);
            return py::make_tuple(to_array(ex.mean), to_array(ex.samples));
        }, py::arg("first"), py::arg("horizon"), py::arg("samples") = 20, py::arg("seed") = 0);

    py::class_<PyTrainer>(m, "Trainer")
        .def(py::init([](const py::dict& cfg, std::size_t batch_size, double lr, std::uint64_t seed,
                         std::uint64_t init_seed) {
            vae::TrainConfig t;
            t.batch_size = batch_size;
            t.opt.lr = lr;
            t.seed = seed;
            return PyTrainer{vae::Trainer(model_config(cfg), t, init_seed)};
        }), py::arg("config") = py::dict(), py::arg("batch_size") = 64, py::arg("lr") = 1e-3, py::arg("seed") = 0,
             py::arg("init_seed") = 0)
        .def("run_epoch", [](PyTrainer& p, const Array& x) {
            const Tensor t = series(x);
            return p.trainer.run_epoch(t, full_mask(t)).report.elbo;
        }, py::arg("x"), "Trains one epoch and returns the mean ELBO over its batches.")
        .def_property_readonly("epoch", [](const PyTrainer& p) { return p.trainer.epoch(); })
        .def("save", [](const PyTrainer& p, const std::string& path) { save_checkpoint(path, p.trainer.checkpoint()); })
        .def("model", [](const PyTrainer& p, bool ema) {
            return Model{p.trainer.model_config(), ema ? p.trainer.ema() : p.trainer.params()};
        }, py::arg("ema") = false);

    // ---- bench ----
    m.def("bench", [](std::vector<std::size_t> lengths, std::size_t batch, std::size_t heads, std::size_t state,
                      std::size_t iterations, std::uint64_t seed) {
        bench::BenchConfig cfg;
        cfg.lengths = std::move(lengths);
        cfg.batch = batch;
        cfg.heads = heads;
        cfg.state = state;
        cfg.iterations = iterations;
        cfg.seed = seed;
        py::list out;
        for (const auto& t : bench::run_bench(cfg))
            out.append(py::dict(py::arg("length") = t.length, py::arg("mode") = bench::mode_name(t.mode),
                                py::arg("train_ms") = t.train_ms, py::arg("infer_ms") = t.infer_ms,
                                py::arg("loss") = t.loss));
        return out;
    }, py::arg("lengths"), py::arg("batch") = 32, py::arg("heads") = 4, py::arg("state") = 64,
       py::arg("iterations") = 100, py::arg("seed") = 0);
}
