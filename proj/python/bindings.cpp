#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dsconv/bench.hpp"
#include "dsconv/dense_conv.hpp"
#include "dsconv/model_store.hpp"
#include "dsconv/pipeline.hpp"
#include "dsconv/sparse_engine.hpp"

namespace py = pybind11;
using namespace dsconv;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor4D<float> to_tensor(const F32Array& a) {
  if (a.ndim() != 4) throw ShapeError("expected a 4-d array (N, C, H, W)");
  Extents e{static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
            static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3))};
  return Tensor4D<float>(e, std::vector<float>(a.data(), a.data() + a.size()));
}

F32Array to_array(const Tensor4D<float>& t) {
  const auto& e = t.extents();
  F32Array out({e.n, e.c, e.h, e.w});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

ConvShape shape_for(const Tensor4D<float>& x, const Tensor4D<float>& w, std::size_t stride, std::size_t padding) {
  const auto& xe = x.extents();
  const auto& we = w.extents();
  if (we.c != xe.c) throw ShapeError("weight input channels do not match the input");
  return {xe.n, xe.c, xe.h, xe.w, we.n, we.h, we.w, stride, padding};
}

std::vector<float> bias_or_zero(const std::optional<std::vector<float>>& b, std::size_t k) {
  return b ? *b : std::vector<float>(k, 0.0f);
}

template <class Fn>
F32Array run_profile(const Tensor4D<float>& x, const std::string& dtype, Fn&& fn) {
  const DType d = parse_dtype(dtype);
  if (d == DType::f16) return to_array(convert<float>(fn(convert<Half>(x), Half{})));
  if (d == DType::f32) return to_array(fn(x, float{}));
  throw ArgumentError("python bindings run the f32 and f16 profiles");
}

F32Array dense(const F32Array& xa, const F32Array& wa, const std::optional<std::vector<float>>& bias,
               std::size_t stride, std::size_t padding, const std::string& dtype, int workers, bool gemm) {
  const auto x = to_tensor(xa);
  const auto w = to_tensor(wa);
  const auto s = shape_for(x, w, stride, padding);
  const auto b = bias_or_zero(bias, s.out_channels);
  return run_profile(x, dtype, [&](const auto& xt, auto tag) {
    using T = decltype(tag);
    const ConvLayerDense<T> l{s, convert<T>(w), b};
    return gemm ? conv_dense_gemm(xt, l, {workers}) : conv_dense_direct(xt, l, {workers});
  });
}

F32Array sparse(const F32Array& xa, const F32Array& wa, const std::optional<std::vector<float>>& bias,
                std::size_t stride, std::size_t padding, std::size_t sub_batch_size, int workers,
                const std::string& dtype) {
  const auto x = to_tensor(xa);
  const auto w = to_tensor(wa);
  const auto s = shape_for(x, w, stride, padding);
  const auto b = bias_or_zero(bias, s.out_channels);
  const EnginePlan plan{sub_batch_size, workers};
  return run_profile(x, dtype, [&](const auto& xt, auto tag) {
    using T = decltype(tag);
    return conv_sparse<T>(xt, build_csr(convert<T>(w), s), b, plan);
  });
}

py::dict record_dict(const BenchRecord& r) {
  py::dict d;
  const auto j = to_json(r);
  for (const auto& [k, v] : j.items()) {
    if (v.is_string()) d[k.c_str()] = v.get<std::string>();
    else if (v.is_number_integer()) d[k.c_str()] = v.get<std::int64_t>();
    else d[k.c_str()] = v.get<double>();
  }
  return d;
}

}  // namespace

PYBIND11_MODULE(_dsconv, m) {
  m.doc() = "Direct sparse convolution, pruning and quantization toolkit";

  static py::exception<Error> base(m, "Error");
  static py::exception<ShapeError> shape_err(m, "ShapeError", base.ptr());
  static py::exception<ArgumentError> arg_err(m, "ArgumentError", base.ptr());
  static py::exception<FormatError> fmt_err(m, "FormatError", base.ptr());
  static py::exception<InvariantError> inv_err(m, "InvariantError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ShapeError& e) {
      shape_err(e.what());
    } catch (const ArgumentError& e) {
      arg_err(e.what());
    } catch (const FormatError& e) {
      fmt_err(e.what());
    } catch (const InvariantError& e) {
      inv_err(e.what());
    } catch (const Error& e) {
      base(e.what());
    }
  });

  m.def("output_shape",
        [](std::size_t h, std::size_t w, std::size_t r, std::size_t s, std::size_t stride, std::size_t padding) {
          ConvShape cs{1, 1, h, w, 1, r, s, stride, padding};
          const auto o = output_shape(cs);
          return py::make_tuple(o.e, o.f);
        },
        py::arg("height"), py::arg("width"), py::arg("kernel_h"), py::arg("kernel_w"), py::arg("stride") = 1,
        py::arg("padding") = 0);

  m.def("conv_dense_direct",
        [](const F32Array& x, const F32Array& w, std::optional<std::vector<float>> bias, std::size_t stride,
           std::size_t padding, const std::string& dtype, int workers) {
          return dense(x, w, bias, stride, padding, dtype, workers, false);
        },
        py::arg("x"), py::arg("weights"), py::arg("bias") = py::none(), py::arg("stride") = 1, py::arg("padding") = 0,
        py::arg("dtype") = "f32", py::arg("workers") = 0);
  m.def("conv_dense_gemm",
        [](const F32Array& x, const F32Array& w, std::optional<std::vector<float>> bias, std::size_t stride,
           std::size_t padding, const std::string& dtype, int workers) {
          return dense(x, w, bias, stride, padding, dtype, workers, true);
        },
        py::arg("x"), py::arg("weights"), py::arg("bias") = py::none(), py::arg("stride") = 1, py::arg("padding") = 0,
        py::arg("dtype") = "f32", py::arg("workers") = 0);
  m.def("conv_sparse", &sparse, py::arg("x"), py::arg("weights"), py::arg("bias") = py::none(),
        py::arg("stride") = 1, py::arg("padding") = 0, py::arg("sub_batch_size") = 4, py::arg("workers") = 0,
        py::arg("dtype") = "f32");

  m.def("build_csr",
        [](const F32Array& wa, std::size_t height, std::size_t width, std::size_t stride, std::size_t padding) {
          const auto w = to_tensor(wa);
          const auto& e = w.extents();
          const ConvShape s{1, e.c, height, width, e.n, e.h, e.w, stride, padding};
          const auto k = build_csr(w, s);
          py::dict d;
          d["values"] = std::vector<float>(k.values().begin(), k.values().end());
          d["colidx"] = std::vector<std::uint32_t>(k.colidx().begin(), k.colidx().end());
          d["rowptr"] = std::vector<std::uint32_t>(k.rowptr().begin(), k.rowptr().end());
          d["sparse_level"] = k.sparse_level();
          d["decompressed"] = to_array(decompress(k));
          return d;
        },
        py::arg("weights"), py::arg("height"), py::arg("width"), py::arg("stride") = 1, py::arg("padding") = 0);

  m.def("fit_fixed_point",
        [](const std::vector<float>& x, int total_bits) {
          const auto p = fit_fixed_point(x, total_bits);
          py::dict d;
          d["total_bits"] = p.total_bits;
          d["int_bits"] = p.int_bits;
          d["frac_bits"] = p.frac_bits;
          d["sigma"] = p.sigma;
          return d;
        },
        py::arg("values"), py::arg("total_bits"));
  m.def("quantize_fixed",
        [](const std::vector<float>& x, int total_bits) {
          const auto p = fit_fixed_point(x, total_bits);
          std::size_t sat = 0;
          auto q = quantize_fixed(x, p, &sat);
          return py::make_tuple(q, sat);
        },
        py::arg("values"), py::arg("total_bits"));
  m.def("build_codebook",
        [](const std::vector<float>& w, std::size_t k, bool pin_zero, std::uint64_t seed) {
          CodebookOptions o;
          o.pin_zero = pin_zero;
          o.seed = seed;
          const auto cb = build_codebook(w, k, o);
          std::vector<float> centroids;
          for (auto c : cb.centroids) centroids.push_back(c.to_float());
          py::dict d;
          d["centroids"] = centroids;
          d["assignments"] = cb.assignments;
          d["decoded"] = cb.decode();
          d["final_sse"] = cb.final_sse;
          return d;
        },
        py::arg("weights"), py::arg("k"), py::arg("pin_zero") = false, py::arg("seed") = 1);

  m.def("preset_names", &preset_names);
  m.def("preset_layers", [](const std::string& name) {
    py::list out;
    for (const auto& l : preset_layers(name)) {
      const auto& s = l.shape;
      py::dict d;
      d["name"] = l.name;
      d["sparsity"] = l.sparsity;
      d["shape"] = py::make_tuple(s.in_channels, s.height, s.width, s.out_channels, s.kernel_h, s.kernel_w,
                                  s.stride, s.padding);
      out.append(d);
    }
    return out;
  });
  m.def("bench_preset_layer",
        [](const std::string& preset, const std::string& layer, std::size_t batch, std::size_t reps,
           std::vector<std::string> dtypes) {
          BenchOptions o;
          o.batch = batch;
          o.repetitions = reps;
          o.dtypes.clear();
          for (const auto& d : dtypes) o.dtypes.push_back(parse_dtype(d));
          for (const auto& l : preset_layers(preset))
            if (l.name == layer) {
              py::list out;
              for (const auto& r : bench_layer(l, o)) out.append(record_dict(r));
              return out;
            }
          throw ArgumentError("no layer '" + layer + "' in preset " + preset);
        },
        py::arg("preset"), py::arg("layer"), py::arg("batch") = 8, py::arg("repetitions") = 5,
        py::arg("dtypes") = std::vector<std::string>{"f32"});

  m.def("prune",
        [](const std::string& config_json, const std::string& out_dir) {
          const auto cfg = pipeline_config_from_json(nlohmann::json::parse(config_json));
          const auto r = [&] {
            py::gil_scoped_release release;
            return run_prune_pipeline(cfg);
          }();
          save_model(r.model, out_dir);
          save_tensor(convert<float>(r.data.validation.images), std::filesystem::path(out_dir) / "validation.bin");
          py::dict d;
          d["baseline_accuracy"] = r.baseline_accuracy;
          d["accuracy"] = r.prune.best.accuracy;
          d["weighted_sparsity"] = weighted_sparsity(r.prune.best.masks);
          d["validation_labels"] = r.data.validation.labels;
          return d;
        },
        py::arg("config_json"), py::arg("out_dir"));

  m.def("model_summary", [](const std::string& dir) {
    const auto model = load_model(dir);
    py::list layers;
    for (const auto& l : model.convs) {
      py::dict d;
      d["name"] = l.name;
      d["storage"] = std::string(to_string(l.storage));
      d["dtype"] = std::string(to_string(l.dtype));
      d["sparsity"] = l.sparsity();
      layers.append(d);
    }
    py::dict d;
    d["classes"] = model.classes;
    d["input"] = py::make_tuple(model.in_channels, model.height, model.width);
    d["layers"] = layers;
    return d;
  });

  m.def("infer",
        [](const std::string& dir, const F32Array& x, std::optional<std::string> config, int workers) {
          const auto model = load_model(dir);
          const auto cfg = config ? load_network_config(*config) : all_dense_config(model);
          const auto logits = ModelRunner(model, cfg, workers).logits(to_tensor(x));
          F32Array out({static_cast<py::ssize_t>(x.shape(0)), static_cast<py::ssize_t>(model.classes)});
          std::copy(logits.begin(), logits.end(), out.mutable_data());
          return out;
        },
        py::arg("model_dir"), py::arg("x"), py::arg("config") = py::none(), py::arg("workers") = 0);

  m.def("load_tensor", [](const std::string& path) { return to_array(load_tensor(path)); });
  m.def("save_tensor", [](const F32Array& x, const std::string& path) { save_tensor(to_tensor(x), path); });
}
