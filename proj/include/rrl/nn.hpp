#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rrl/rng.hpp"
#include "rrl/tensor.hpp"

namespace rrl {

enum class LayerKind { kDense, kConv2d, kRelu, kLayerNorm, kFlatten, kSoftmax, kConcatAux };
enum class Init { kHe, kXavier, kZero };

/// One layer of a sequential network. Dense weights are stored [in,out] so the
/// forward pass streams contiguously; conv weights are [out_ch,in_ch,k,k].
struct Layer {
  LayerKind kind;
  std::string name;
  int in_dim = 0, out_dim = 0;                        // dense / layer-norm / concat
  int in_ch = 0, out_ch = 0, ksize = 0, stride = 1, pad = 0;  // conv2d
  Init init = Init::kHe;
  Tensor weight;  // dense [in,out]; conv [out,in,k,k]; layer-norm gain [d]
  Tensor bias;    // dense [out]; conv [out]; layer-norm bias [d]

  bool has_params() const {
    return kind == LayerKind::kDense || kind == LayerKind::kConv2d ||
           kind == LayerKind::kLayerNorm;
  }
};

/// Per-layer parameter gradients, aligned with Network::layers.
struct Grads {
  std::vector<Tensor> weight, bias;

  void zero() {
    for (auto& t : weight) t.fill(0.0f);
    for (auto& t : bias) t.fill(0.0f);
  }
};

/// Activation cache for one forward pass. acts[0] is the input, acts[i+1] the
/// output of layer i. Reusable across calls; not shareable across threads.
struct Forward {
  std::vector<Tensor> acts;
  std::vector<std::vector<float>> col;   // per conv layer im2col scratch
  std::vector<std::vector<float>> dcol;  // backward scratch
};

namespace detail {

inline void im2col(const float* in, int ci, int h, int w, int k, int stride, int pad,
                   int ho, int wo, float* col) {
  // col is [ci*k*k, ho*wo], zero-padded outside the image.
  const int plane = ho * wo;
  for (int c = 0; c < ci; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        float* crow = col + ((c * k + kh) * k + kw) * plane;
        for (int y = 0; y < ho; ++y) {
          const int hi = y * stride + kh - pad;
          float* dst = crow + y * wo;
          if (hi < 0 || hi >= h) {
            std::fill(dst, dst + wo, 0.0f);
            continue;
          }
          const float* src = in + (c * h + hi) * w;
          for (int x = 0; x < wo; ++x) {
            const int wi = x * stride + kw - pad;
            dst[x] = (wi >= 0 && wi < w) ? src[wi] : 0.0f;
          }
        }
      }
    }
  }
}

inline void col2im_acc(const float* col, int ci, int h, int w, int k, int stride, int pad,
                       int ho, int wo, float* din) {
  const int plane = ho * wo;
  for (int c = 0; c < ci; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const float* crow = col + ((c * k + kh) * k + kw) * plane;
        for (int y = 0; y < ho; ++y) {
          const int hi = y * stride + kh - pad;
          if (hi < 0 || hi >= h) continue;
          float* dst = din + (c * h + hi) * w;
          const float* src = crow + y * wo;
          for (int x = 0; x < wo; ++x) {
            const int wi = x * stride + kw - pad;
            if (wi >= 0 && wi < w) dst[wi] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Sequential network with named parameters, one optional auxiliary input
/// (appended by a ConcatAux layer), and named taps on intermediate outputs.
class Network {
 public:
  std::vector<Layer> layers;
  std::vector<int> input_shape;             // per-sample shape, no batch dim
  int aux_dim = 0;                          // > 0 iff a ConcatAux layer exists
  std::map<std::string, int> taps;          // label -> layer index

  // ---- builder ----
  Network& input(std::vector<int> shape) {
    input_shape = std::move(shape);
    cur_ = input_shape;
    return *this;
  }

  Network& conv2d(std::string name, int out_ch, int ksize, int stride, int pad,
                  Init init = Init::kHe) {
    require_rank(3, "conv2d");
    Layer l;
    l.kind = LayerKind::kConv2d;
    l.name = std::move(name);
    l.in_ch = cur_[0];
    l.out_ch = out_ch;
    l.ksize = ksize;
    l.stride = stride;
    l.pad = pad;
    l.init = init;
    const int ho = (cur_[1] + 2 * pad - ksize) / stride + 1;
    const int wo = (cur_[2] + 2 * pad - ksize) / stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d '" + l.name + "': empty output");
    l.weight = Tensor({out_ch, l.in_ch, ksize, ksize});
    l.bias = Tensor({out_ch});
    cur_ = {out_ch, ho, wo};
    push(std::move(l));
    return *this;
  }

  Network& dense(std::string name, int out_dim, Init init = Init::kHe) {
    require_rank(1, "dense");
    Layer l;
    l.kind = LayerKind::kDense;
    l.name = std::move(name);
    l.in_dim = cur_[0];
    l.out_dim = out_dim;
    l.init = init;
    l.weight = Tensor({l.in_dim, out_dim});
    l.bias = Tensor({out_dim});
    cur_ = {out_dim};
    push(std::move(l));
    return *this;
  }

  Network& relu() { return plain(LayerKind::kRelu, "relu"); }

  Network& layer_norm(std::string name) {
    require_rank(1, "layer_norm");
    Layer l;
    l.kind = LayerKind::kLayerNorm;
    l.name = std::move(name);
    l.in_dim = l.out_dim = cur_[0];
    l.weight = Tensor({cur_[0]}, 1.0f);  // gain
    l.bias = Tensor({cur_[0]});
    push(std::move(l));
    return *this;
  }

  Network& flatten() {
    Layer l;
    l.kind = LayerKind::kFlatten;
    l.name = auto_name("flatten");
    int d = 1;
    for (int e : cur_) d *= e;
    l.out_dim = d;
    cur_ = {d};
    push(std::move(l));
    return *this;
  }

  Network& softmax() { return plain(LayerKind::kSoftmax, "softmax"); }

  Network& concat_aux(int dim) {
    require_rank(1, "concat_aux");
    if (aux_dim > 0) throw std::invalid_argument("concat_aux: only one auxiliary input supported");
    Layer l;
    l.kind = LayerKind::kConcatAux;
    l.name = auto_name("concat_aux");
    l.in_dim = cur_[0];
    l.out_dim = cur_[0] + dim;
    aux_dim = dim;
    cur_ = {l.out_dim};
    push(std::move(l));
    return *this;
  }

  Network& tap(const std::string& label) {
    if (layers.empty()) throw std::invalid_argument("tap '" + label + "' before any layer");
    if (!taps.emplace(label, static_cast<int>(layers.size()) - 1).second)
      throw std::invalid_argument("duplicate tap label '" + label + "'");
    return *this;
  }

  const std::vector<int>& output_shape() const { return cur_; }
  int output_dim() const {
    int d = 1;
    for (int e : cur_) d *= e;
    return d;
  }

  void init_params(Rng& rng) {
    for (auto& l : layers) {
      if (l.kind == LayerKind::kDense || l.kind == LayerKind::kConv2d) {
        const int fan_in = l.kind == LayerKind::kDense ? l.in_dim : l.in_ch * l.ksize * l.ksize;
        const int fan_out = l.kind == LayerKind::kDense ? l.out_dim : l.out_ch * l.ksize * l.ksize;
        float limit = 0.0f;
        if (l.init == Init::kHe)
          limit = std::sqrt(6.0f / static_cast<float>(fan_in));
        else if (l.init == Init::kXavier)
          limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
        for (auto& v : l.weight.data)
          v = static_cast<float>(rng.uniform(-limit, limit));
        l.bias.fill(0.0f);
      }
    }
  }

  // ---- parameter access ----
  std::vector<Tensor*> param_tensors() {
    std::vector<Tensor*> out;
    for (auto& l : layers)
      if (l.has_params()) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    return out;
  }
  std::vector<const Tensor*> param_tensors() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers)
      if (l.has_params()) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    return out;
  }
  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (const auto& l : layers)
      if (l.has_params()) {
        out.push_back(l.name + (l.kind == LayerKind::kLayerNorm ? ".gain" : ".weight"));
        out.push_back(l.name + ".bias");
      }
    return out;
  }
  int64_t param_count() const {
    int64_t n = 0;
    for (const auto* t : param_tensors()) n += t->size();
    return n;
  }

  Grads make_grads() const {
    Grads g;
    g.weight.reserve(layers.size());
    g.bias.reserve(layers.size());
    for (const auto& l : layers) {
      g.weight.push_back(l.has_params() ? Tensor(l.weight.shape) : Tensor());
      g.bias.push_back(l.has_params() ? Tensor(l.bias.shape) : Tensor());
    }
    return g;
  }

  std::vector<Tensor*> grad_tensors(Grads& g) const {
    std::vector<Tensor*> out;
    for (size_t i = 0; i < layers.size(); ++i)
      if (layers[i].has_params()) {
        out.push_back(&g.weight[i]);
        out.push_back(&g.bias[i]);
      }
    return out;
  }

  // ---- forward ----
  // input is batched: shape {B, input_shape...}. aux must be {B, aux_dim} when
  // the network has a ConcatAux layer, null otherwise.
  const Tensor& forward(const Tensor& in, const Tensor* aux, Forward& ws) const {
    check_input(in, aux);
    const int batch = in.dim(0);
    ws.acts.resize(layers.size() + 1);
    ws.col.resize(layers.size());
    ws.acts[0] = in;
    for (size_t i = 0; i < layers.size(); ++i)
      forward_layer(static_cast<int>(i), batch, aux, ws);
    return ws.acts.back();
  }

  // ---- backward ----
  // Accumulates parameter gradients into g (caller zeroes). out_grad must
  // match the output shape of the last layer. Optionally produces the
  // gradient w.r.t. the network input.
  void backward(const Forward& ws, const Tensor& out_grad, Grads& g,
                Tensor* input_grad = nullptr) const {
    if (ws.acts.size() != layers.size() + 1)
      throw std::invalid_argument("backward: workspace does not hold a forward pass");
    if (!ws.acts.back().same_shape(out_grad))
      throw std::invalid_argument("backward: output gradient shape " +
                                  Tensor::shape_str(out_grad.shape) + " does not match output " +
                                  Tensor::shape_str(ws.acts.back().shape));
    const int batch = ws.acts[0].dim(0);
    Tensor up = out_grad;
    Tensor down;
    auto* mws = const_cast<Forward*>(&ws);
    mws->dcol.resize(layers.size());
    for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
      const bool need_down = i > 0 || input_grad != nullptr;
      backward_layer(i, batch, up, need_down ? &down : nullptr, g, *mws);
      if (layers[static_cast<size_t>(i)].has_params()) {
        const auto& l = layers[static_cast<size_t>(i)];
        if (!g.weight[static_cast<size_t>(i)].all_finite() ||
            !g.bias[static_cast<size_t>(i)].all_finite())
          throw std::runtime_error("backward: non-finite gradient in layer '" + l.name + "'");
      }
      if (need_down) up = std::move(down);
    }
    if (input_grad != nullptr) *input_grad = std::move(up);
  }

 private:
  std::vector<int> cur_;

  void push(Layer l) {
    if (l.name.empty()) l.name = "layer" + std::to_string(layers.size());
    for (const auto& other : layers)
      if (other.name == l.name) throw std::invalid_argument("duplicate layer name '" + l.name + "'");
    layers.push_back(std::move(l));
  }

  std::string auto_name(const char* base) const {
    return std::string(base) + std::to_string(layers.size());
  }

  Network& plain(LayerKind kind, const char* base) {
    Layer l;
    l.kind = kind;
    l.name = auto_name(base);
    push(std::move(l));
    return *this;
  }

  void require_rank(int r, const char* what) const {
    if (static_cast<int>(cur_.size()) != r)
      throw std::invalid_argument(std::string(what) + ": expects rank-" + std::to_string(r) +
                                  " per-sample input, have " + Tensor::shape_str(cur_));
  }

  void check_input(const Tensor& in, const Tensor* aux) const {
    if (in.rank() != static_cast<int>(input_shape.size()) + 1 ||
        !std::equal(input_shape.begin(), input_shape.end(), in.shape.begin() + 1))
      throw std::invalid_argument("evaluate: input shape " + Tensor::shape_str(in.shape) +
                                  " does not match expected {B}+" +
                                  Tensor::shape_str(input_shape) + " at layer '" +
                                  (layers.empty() ? "<input>" : layers.front().name) + "'");
    if (aux_dim > 0) {
      if (aux == nullptr)
        throw std::invalid_argument("evaluate: network expects an auxiliary input");
      if (aux->rank() != 2 || aux->dim(0) != in.dim(0) || aux->dim(1) != aux_dim)
        throw std::invalid_argument("evaluate: auxiliary input shape " +
                                    Tensor::shape_str(aux->shape) + " does not match {B," +
                                    std::to_string(aux_dim) + "}");
    }
  }

  void forward_layer(int idx, int batch, const Tensor* aux, Forward& ws) const {
    const Layer& l = layers[static_cast<size_t>(idx)];
    const Tensor& x = ws.acts[static_cast<size_t>(idx)];
    Tensor& y = ws.acts[static_cast<size_t>(idx) + 1];
    switch (l.kind) {
      case LayerKind::kDense: {
        y = Tensor({batch, l.out_dim});
        for (int b = 0; b < batch; ++b)
          std::memcpy(&y[static_cast<int64_t>(b) * l.out_dim], l.bias.data.data(),
                      sizeof(float) * static_cast<size_t>(l.out_dim));
        gemm_acc(x.data.data(), l.weight.data.data(), y.data.data(), batch, l.in_dim, l.out_dim);
        break;
      }
      case LayerKind::kConv2d: {
        const int h = x.dim(2), w = x.dim(3);
        const int ho = (h + 2 * l.pad - l.ksize) / l.stride + 1;
        const int wo = (w + 2 * l.pad - l.ksize) / l.stride + 1;
        const int ckk = l.in_ch * l.ksize * l.ksize;
        const int plane = ho * wo;
        y = Tensor({batch, l.out_ch, ho, wo});
        auto& col = ws.col[static_cast<size_t>(idx)];
        col.resize(static_cast<size_t>(ckk) * plane);
        for (int b = 0; b < batch; ++b) {
          detail::im2col(&x[static_cast<int64_t>(b) * l.in_ch * h * w], l.in_ch, h, w, l.ksize,
                         l.stride, l.pad, ho, wo, col.data());
          float* out = &y[static_cast<int64_t>(b) * l.out_ch * plane];
          for (int co = 0; co < l.out_ch; ++co)
            std::fill(out + static_cast<int64_t>(co) * plane, out + (co + 1ll) * plane,
                      l.bias[co]);
          gemm_acc(l.weight.data.data(), col.data(), out, l.out_ch, ckk, plane);
        }
        break;
      }
      case LayerKind::kRelu: {
        y = x;
        for (auto& v : y.data) v = v > 0.0f ? v : 0.0f;
        break;
      }
      case LayerKind::kLayerNorm: {
        y = x;
        const int d = l.in_dim;
        for (int b = 0; b < batch; ++b) {
          float* row = &y[static_cast<int64_t>(b) * d];
          double mean = 0.0;
          for (int i = 0; i < d; ++i) mean += row[i];
          mean /= d;
          double var = 0.0;
          for (int i = 0; i < d; ++i) {
            const double c = row[i] - mean;
            var += c * c;
          }
          var /= d;
          const float inv = 1.0f / std::sqrt(static_cast<float>(var) + kLnEps);
          for (int i = 0; i < d; ++i) {
            const float xn = (row[i] - static_cast<float>(mean)) * inv;
            row[i] = l.weight[i] * xn + l.bias[i];
          }
        }
        break;
      }
      case LayerKind::kFlatten: {
        y = x;
        y.shape = {batch, static_cast<int>(x.size() / batch)};
        break;
      }
      case LayerKind::kSoftmax: {
        y = x;
        const int d = y.dim(y.rank() - 1);
        const int64_t rows = y.size() / d;
        for (int64_t r = 0; r < rows; ++r) {
          float* row = &y[r * d];
          float mx = row[0];
          for (int i = 1; i < d; ++i) mx = std::max(mx, row[i]);
          float sum = 0.0f;
          for (int i = 0; i < d; ++i) {
            row[i] = std::exp(row[i] - mx);
            sum += row[i];
          }
          const float inv = 1.0f / sum;
          for (int i = 0; i < d; ++i) row[i] *= inv;
        }
        break;
      }
      case LayerKind::kConcatAux: {
        y = Tensor({batch, l.out_dim});
        const int a = l.out_dim - l.in_dim;
        for (int b = 0; b < batch; ++b) {
          std::memcpy(&y[static_cast<int64_t>(b) * l.out_dim],
                      &x[static_cast<int64_t>(b) * l.in_dim],
                      sizeof(float) * static_cast<size_t>(l.in_dim));
          std::memcpy(&y[static_cast<int64_t>(b) * l.out_dim + l.in_dim],
                      &(*aux)[static_cast<int64_t>(b) * a], sizeof(float) * static_cast<size_t>(a));
        }
        break;
      }
    }
  }

  void backward_layer(int idx, int batch, const Tensor& up, Tensor* down, Grads& g,
                      Forward& ws) const {
    const Layer& l = layers[static_cast<size_t>(idx)];
    const Tensor& x = ws.acts[static_cast<size_t>(idx)];
    const Tensor& y = ws.acts[static_cast<size_t>(idx) + 1];
    switch (l.kind) {
      case LayerKind::kDense: {
        Tensor& dw = g.weight[static_cast<size_t>(idx)];
        Tensor& db = g.bias[static_cast<size_t>(idx)];
        for (int b = 0; b < batch; ++b) {
          const float* urow = &up[static_cast<int64_t>(b) * l.out_dim];
          axpyf(1.0f, urow, db.data.data(), l.out_dim);
          const float* xrow = &x[static_cast<int64_t>(b) * l.in_dim];
          for (int i = 0; i < l.in_dim; ++i)
            if (xrow[i] != 0.0f)
              axpyf(xrow[i], urow, &dw[static_cast<int64_t>(i) * l.out_dim], l.out_dim);
        }
        if (down) {
          *down = Tensor({batch, l.in_dim});
          for (int b = 0; b < batch; ++b) {
            const float* urow = &up[static_cast<int64_t>(b) * l.out_dim];
            float* drow = &(*down)[static_cast<int64_t>(b) * l.in_dim];
            for (int i = 0; i < l.in_dim; ++i)
              drow[i] = dotf(urow, &l.weight[static_cast<int64_t>(i) * l.out_dim], l.out_dim);
          }
        }
        break;
      }
      case LayerKind::kConv2d: {
        const int h = x.dim(2), w = x.dim(3);
        const int ho = y.dim(2), wo = y.dim(3);
        const int ckk = l.in_ch * l.ksize * l.ksize;
        const int plane = ho * wo;
        Tensor& dw = g.weight[static_cast<size_t>(idx)];
        Tensor& db = g.bias[static_cast<size_t>(idx)];
        auto& col = ws.col[static_cast<size_t>(idx)];
        auto& dcol = ws.dcol[static_cast<size_t>(idx)];
        col.resize(static_cast<size_t>(ckk) * plane);
        dcol.resize(static_cast<size_t>(ckk) * plane);
        if (down) *down = Tensor({batch, l.in_ch, h, w});
        for (int b = 0; b < batch; ++b) {
          // Recompute the column buffer for this sample; cheaper than caching
          // every sample's columns across the batch.
          detail::im2col(&x[static_cast<int64_t>(b) * l.in_ch * h * w], l.in_ch, h, w, l.ksize,
                         l.stride, l.pad, ho, wo, col.data());
          const float* uo = &up[static_cast<int64_t>(b) * l.out_ch * plane];
          for (int co = 0; co < l.out_ch; ++co) {
            const float* urow = uo + static_cast<int64_t>(co) * plane;
            float s = 0.0f;
            for (int j = 0; j < plane; ++j) s += urow[j];
            db[co] += s;
            for (int q = 0; q < ckk; ++q)
              dw[static_cast<int64_t>(co) * ckk + q] +=
                  dotf(urow, col.data() + static_cast<int64_t>(q) * plane, plane);
          }
          if (down) {
            std::fill(dcol.begin(), dcol.end(), 0.0f);
            for (int co = 0; co < l.out_ch; ++co) {
              const float* urow = uo + static_cast<int64_t>(co) * plane;
              const float* wrow = &l.weight[static_cast<int64_t>(co) * ckk];
              for (int q = 0; q < ckk; ++q)
                if (wrow[q] != 0.0f)
                  axpyf(wrow[q], urow, dcol.data() + static_cast<int64_t>(q) * plane, plane);
            }
            detail::col2im_acc(dcol.data(), l.in_ch, h, w, l.ksize, l.stride, l.pad, ho, wo,
                               &(*down)[static_cast<int64_t>(b) * l.in_ch * h * w]);
          }
        }
        break;
      }
      case LayerKind::kRelu: {
        if (down) {
          *down = up;
          for (int64_t i = 0; i < up.size(); ++i)
            if (x[i] <= 0.0f) (*down)[i] = 0.0f;
        }
        break;
      }
      case LayerKind::kLayerNorm: {
        const int d = l.in_dim;
        Tensor& dgain = g.weight[static_cast<size_t>(idx)];
        Tensor& dbias = g.bias[static_cast<size_t>(idx)];
        if (down) *down = Tensor({batch, d});
        std::vector<float> xn(static_cast<size_t>(d));
        for (int b = 0; b < batch; ++b) {
          const float* xrow = &x[static_cast<int64_t>(b) * d];
          const float* urow = &up[static_cast<int64_t>(b) * d];
          double mean = 0.0;
          for (int i = 0; i < d; ++i) mean += xrow[i];
          mean /= d;
          double var = 0.0;
          for (int i = 0; i < d; ++i) {
            const double c = xrow[i] - mean;
            var += c * c;
          }
          var /= d;
          const float inv = 1.0f / std::sqrt(static_cast<float>(var) + kLnEps);
          double sum_dxn = 0.0, sum_dxn_xn = 0.0;
          for (int i = 0; i < d; ++i) {
            xn[static_cast<size_t>(i)] = (xrow[i] - static_cast<float>(mean)) * inv;
            const float dxn = urow[i] * l.weight[i];
            sum_dxn += dxn;
            sum_dxn_xn += dxn * xn[static_cast<size_t>(i)];
            dgain[i] += urow[i] * xn[static_cast<size_t>(i)];
            dbias[i] += urow[i];
          }
          if (down) {
            float* drow = &(*down)[static_cast<int64_t>(b) * d];
            const float m1 = static_cast<float>(sum_dxn / d);
            const float m2 = static_cast<float>(sum_dxn_xn / d);
            for (int i = 0; i < d; ++i) {
              const float dxn = urow[i] * l.weight[i];
              drow[i] = inv * (dxn - m1 - xn[static_cast<size_t>(i)] * m2);
            }
          }
        }
        break;
      }
      case LayerKind::kFlatten: {
        if (down) {
          *down = up;
          (*down).shape = x.shape;
        }
        break;
      }
      case LayerKind::kSoftmax: {
        if (down) {
          *down = up;
          const int d = y.dim(y.rank() - 1);
          const int64_t rows = y.size() / d;
          for (int64_t r = 0; r < rows; ++r) {
            const float* yrow = &y[r * d];
            float* drow = &(*down)[r * d];
            float dot = 0.0f;
            for (int i = 0; i < d; ++i) dot += yrow[i] * drow[i];
            for (int i = 0; i < d; ++i) drow[i] = yrow[i] * (drow[i] - dot);
          }
        }
        break;
      }
      case LayerKind::kConcatAux: {
        if (down) {
          *down = Tensor({batch, l.in_dim});
          for (int b = 0; b < batch; ++b)
            std::memcpy(&(*down)[static_cast<int64_t>(b) * l.in_dim],
                        &up[static_cast<int64_t>(b) * l.out_dim],
                        sizeof(float) * static_cast<size_t>(l.in_dim));
        }
        break;
      }
    }
  }

  static constexpr float kLnEps = 1e-5f;
};

/// Evaluation result of the convenience API: final output plus every tapped
/// intermediate.
struct EvalResult {
  Tensor output;
  std::map<std::string, Tensor> taps;
};

inline EvalResult evaluate_network(const Network& net, const Tensor& in,
                                   const Tensor* aux = nullptr) {
  Forward ws;
  net.forward(in, aux, ws);
  EvalResult res;
  res.output = ws.acts.back();
  for (const auto& [label, idx] : net.taps) res.taps[label] = ws.acts[static_cast<size_t>(idx) + 1];
  return res;
}

/// Gradients of every named parameter for the given upstream gradient.
/// Parameters a path does not reach keep zero gradients.
inline std::map<std::string, Tensor> backprop(const Network& net, const Tensor& in,
                                              const Tensor& out_grad,
                                              const Tensor* aux = nullptr) {
  Forward ws;
  net.forward(in, aux, ws);
  Grads g = net.make_grads();
  g.zero();
  net.backward(ws, out_grad, g);
  std::map<std::string, Tensor> out;
  for (size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    if (!l.has_params()) continue;
    out[l.name + (l.kind == LayerKind::kLayerNorm ? ".gain" : ".weight")] = g.weight[i];
    out[l.name + ".bias"] = g.bias[i];
  }
  return out;
}

/// Compares analytic parameter gradients against central finite differences of
/// `loss` (a scalar function of the network output). Returns the maximum
/// relative error max |analytic - numeric| / max(1, |numeric|).
inline double finite_difference_check(Network& net, const Tensor& in,
                                      const std::function<double(const Tensor&)>& loss,
                                      double eps, const Tensor* aux = nullptr) {
  if (!(eps > 0.0 && eps < 1e-1)) throw std::invalid_argument("finite_difference_check: eps out of range");
  Forward ws;
  net.forward(in, aux, ws);
  Tensor out = ws.acts.back();

  // Numeric gradient of the loss w.r.t. the network output. Dividing by the
  // achieved float32 perturbation (not the requested eps) removes the rounding
  // asymmetry of keep +/- eps.
  Tensor dout(out.shape);
  for (int64_t i = 0; i < out.size(); ++i) {
    const float keep = out[i];
    const float hi = keep + static_cast<float>(eps);
    const float lo = keep - static_cast<float>(eps);
    out[i] = hi;
    const double lp = loss(out);
    out[i] = lo;
    const double lm = loss(out);
    out[i] = keep;
    dout[i] = static_cast<float>((lp - lm) / (static_cast<double>(hi) - lo));
  }

  Grads g = net.make_grads();
  g.zero();
  net.backward(ws, dout, g);

  double max_rel = 0.0;
  auto params = net.param_tensors();
  auto grads = net.grad_tensors(g);
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p];
    for (int64_t i = 0; i < t.size(); ++i) {
      const float keep = t[i];
      const float hi = keep + static_cast<float>(eps);
      const float lo = keep - static_cast<float>(eps);
      Forward tmp;
      t[i] = hi;
      const double lp = loss(net.forward(in, aux, tmp));
      t[i] = lo;
      const double lm = loss(net.forward(in, aux, tmp));
      t[i] = keep;
      const double numeric = (lp - lm) / (static_cast<double>(hi) - lo);
      const double analytic = (*grads[p])[i];
      const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace rrl
