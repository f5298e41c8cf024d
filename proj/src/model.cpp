#include "dtlab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dtlab/rng.hpp"

namespace dtlab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and dataset formats assume a little-endian host");

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

ConvParam make_conv(int out_ch, int in_ch, int dims) {
  Shape w{out_ch, in_ch, 3};
  if (dims == 2) w.push_back(3);
  ConvParam p;
  p.weights = Tensor::zeros(std::move(w), /*requires_grad=*/true);
  p.bias = Tensor::zeros({out_ch}, /*requires_grad=*/true);
  return p;
}

// Kaiming-style fan-in-scaled uniform init: weights U(+-sqrt(3/fan_in))
// (unit-gain bound; the skip connections already carry the signal, so the
// residual branches must not amplify it), bias U(+-1/sqrt(fan_in)).
void fill_conv(ConvParam& p, Rng& rng) {
  const auto& ws = p.weights.shape();
  int64_t fan_in = 1;
  for (size_t i = 1; i < ws.size(); ++i) fan_in *= ws[i];
  const float wbound = std::sqrt(3.0f / static_cast<float>(fan_in));
  for (float& v : p.weights.mutable_values()) v = rng.uniform(-wbound, wbound);
  const float bbound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  for (float& v : p.bias.mutable_values()) v = rng.uniform(-bbound, bbound);
}

ModelState make_structure(const ModelSpec& spec) {
  spec.validate();
  ModelState s;
  s.spec = spec;
  const int d = spec.conv_dims();
  const int w = spec.width;
  const int in_ch = spec.input_channels();
  s.projection = make_conv(w, in_ch, d);
  if (spec.recall) s.recall_adapter = make_conv(w, w + in_ch, d);
  const int nblocks = spec.feed_forward ? kFeedForwardBlocks : 1;
  s.blocks.resize(static_cast<size_t>(nblocks));
  for (auto& blk : s.blocks)
    for (auto& c : blk.convs) c = make_conv(w, w, d);
  int prev = w;
  for (int ch : spec.head_channels) {
    s.head.push_back(make_conv(ch, prev, d));
    prev = ch;
  }
  return s;
}

template <typename Fn>
void visit_params(const ModelState& s, Fn&& fn) {
  fn("p", s.projection);
  if (s.recall_adapter) fn("recall_adapter", *s.recall_adapter);
  for (size_t i = 0; i < s.blocks.size(); ++i)
    for (size_t j = 0; j < 4; ++j)
      fn("block" + std::to_string(i) + ".conv" + std::to_string(j),
         s.blocks[i].convs[j]);
  for (size_t i = 0; i < s.head.size(); ++i)
    fn("head.conv" + std::to_string(i), s.head[i]);
}

}  // namespace

void ModelSpec::validate() const {
  check(width >= 1, "model spec: width must be >= 1");
  check(max_iters >= 1, "model spec: max_iters must be >= 1");
  check(!(recall && feed_forward),
        "model spec: recall and feed_forward are mutually exclusive");
  check(head_channels.size() == 3,
        "model spec: head must have exactly 3 convolutions");
  check(head_channels.back() == 2,
        "model spec: head must end in 2 channels for binary classification");
  for (int c : head_channels) check(c >= 1, "model spec: head channels must be >= 1");
}

std::vector<int> ModelSpec::default_head(TaskKind task, int width) {
  if (task == TaskKind::prefix_sum) return {width, std::max(2, width / 2), 2};
  return {32, 8, 2};
}

ModelSpec ModelSpec::make(TaskKind task, int width, bool recall,
                          bool feed_forward, int max_iters) {
  ModelSpec spec;
  spec.task = task;
  spec.width = width;
  spec.recall = recall;
  spec.feed_forward = feed_forward;
  spec.max_iters = max_iters;
  spec.head_channels = default_head(task, width);
  spec.validate();
  return spec;
}

ModelState ModelState::init(const ModelSpec& spec, uint64_t seed) {
  ModelState s = make_structure(spec);
  Rng rng(Rng::substream(seed, 0));
  fill_conv(s.projection, rng);
  if (s.recall_adapter) fill_conv(*s.recall_adapter, rng);
  for (auto& blk : s.blocks)
    for (auto& c : blk.convs) fill_conv(c, rng);
  for (auto& c : s.head) fill_conv(c, rng);
  return s;
}

std::vector<Tensor> ModelState::parameters() const {
  std::vector<Tensor> out;
  visit_params(*this, [&](const std::string&, const ConvParam& p) {
    out.push_back(p.weights);
    out.push_back(p.bias);
  });
  return out;
}

std::vector<std::pair<std::string, Tensor>> ModelState::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  visit_params(*this, [&](const std::string& name, const ConvParam& p) {
    out.emplace_back(name + ".weights", p.weights);
    out.emplace_back(name + ".bias", p.bias);
  });
  return out;
}

int64_t ModelState::parameter_count() const {
  int64_t n = 0;
  for (const Tensor& t : parameters()) n += t.numel();
  return n;
}

Tensor project(const ModelState& state, const Tensor& x) {
  check(x.rank() == static_cast<size_t>(state.spec.conv_dims()) + 2,
        "project: input rank " + std::to_string(x.rank()) + " for task " +
            task_name(state.spec.task));
  check(x.extent(1) == state.spec.input_channels(),
        "project: input has " + std::to_string(x.extent(1)) +
            " channels, task expects " +
            std::to_string(state.spec.input_channels()));
  return relu(conv(x, state.projection.weights, state.projection.bias,
                   state.spec.conv_dims()));
}

namespace {

Tensor block_apply(const BlockParams& blk, const Tensor& z, int dims) {
  Tensor c1 = relu(conv(z, blk.convs[0].weights, blk.convs[0].bias, dims));
  Tensor c2 = conv(c1, blk.convs[1].weights, blk.convs[1].bias, dims);
  Tensor half = relu(add(c2, z));
  Tensor c3 = relu(conv(half, blk.convs[2].weights, blk.convs[2].bias, dims));
  Tensor c4 = conv(c3, blk.convs[3].weights, blk.convs[3].bias, dims);
  return relu(add(c4, half));
}

Tensor step_with_block(const ModelState& state, const BlockParams& blk,
                       const Tensor& phi, const Tensor& x) {
  const int d = state.spec.conv_dims();
  if (!state.spec.recall) return block_apply(blk, phi, d);
  Tensor cat = concat_channels(phi, x);
  Tensor mapped = relu(conv(cat, state.recall_adapter->weights,
                            state.recall_adapter->bias, d));
  return block_apply(blk, mapped, d);
}

void check_phi(const ModelState& state, const Tensor& phi) {
  check(phi.rank() == static_cast<size_t>(state.spec.conv_dims()) + 2,
        "features: rank " + std::to_string(phi.rank()));
  check(phi.extent(1) == state.spec.width,
        "features: channel axis has " + std::to_string(phi.extent(1)) +
            " channels, model width is " + std::to_string(state.spec.width));
}

}  // namespace

Tensor recur_step(const ModelState& state, const Tensor& phi, const Tensor& x) {
  check(!state.spec.feed_forward,
        "recur_step: feed-forward models have no shared recurrence");
  check_phi(state, phi);
  return step_with_block(state, state.blocks[0], phi, x);
}

Tensor head_apply(const ModelState& state, const Tensor& phi) {
  const int d = state.spec.conv_dims();
  Tensor h = relu(conv(phi, state.head[0].weights, state.head[0].bias, d));
  h = relu(conv(h, state.head[1].weights, state.head[1].bias, d));
  return conv(h, state.head[2].weights, state.head[2].bias, d);
}

Tensor forward_logits(const ModelState& state, const Tensor& x, int iters) {
  check(iters >= 1, "forward: iteration count must be >= 1");
  if (state.spec.feed_forward) {
    check(iters == kFeedForwardBlocks,
          "forward: feed-forward depth is fixed to " +
              std::to_string(kFeedForwardBlocks) + " blocks, got " +
              std::to_string(iters));
    Tensor phi = project(state, x);
    for (const BlockParams& blk : state.blocks)
      phi = step_with_block(state, blk, phi, x);
    return head_apply(state, phi);
  }
  Tensor phi = project(state, x);
  for (int t = 0; t < iters; ++t) phi = recur_step(state, phi, x);
  return head_apply(state, phi);
}

IterationTrace forward(const ModelState& state, const Tensor& x, int iters,
                       bool record_phi) {
  if (state.spec.feed_forward) {
    check(iters == kFeedForwardBlocks,
          "forward: feed-forward depth is fixed to " +
              std::to_string(kFeedForwardBlocks) + " blocks, got " +
              std::to_string(iters));
    NoGradGuard ng;
    IterationTrace trace;
    trace.iters = iters;
    Tensor phi = project(state, x);
    for (const BlockParams& blk : state.blocks) {
      phi = step_with_block(state, blk, phi, x);
      if (record_phi) trace.phi.push_back(phi);
      Tensor logits = head_apply(state, phi);
      trace.confidence.push_back(confidence(logits));
      trace.logits.push_back(std::move(logits));
    }
    return trace;
  }
  NoGradGuard ng;
  return forward_from(state, project(state, x), x, iters, record_phi);
}

IterationTrace forward_from(const ModelState& state, const Tensor& phi_start,
                            const Tensor& x, int iters, bool record_phi) {
  check(!state.spec.feed_forward,
        "forward_from: feed-forward models cannot resume from features");
  check(iters >= 1, "forward_from: iteration count must be >= 1");
  check_phi(state, phi_start);
  if (state.spec.recall) {
    check(phi_start.rank() == x.rank() && phi_start.extent(0) == x.extent(0),
          "forward_from: feature/input batch mismatch");
    for (size_t ax = 2; ax < x.rank(); ++ax)
      check(phi_start.extent(ax) == x.extent(ax),
            "forward_from: feature spatial axis " + std::to_string(ax) +
                " has extent " + std::to_string(phi_start.extent(ax)) +
                ", input has " + std::to_string(x.extent(ax)));
  }
  NoGradGuard ng;
  IterationTrace trace;
  trace.iters = iters;
  trace.phi.reserve(record_phi ? static_cast<size_t>(iters) : 0);
  trace.logits.reserve(static_cast<size_t>(iters));
  Tensor phi = phi_start;
  for (int t = 0; t < iters; ++t) {
    phi = recur_step(state, phi, x);
    if (record_phi) trace.phi.push_back(phi);
    Tensor logits = head_apply(state, phi);
    trace.confidence.push_back(confidence(logits));
    trace.logits.push_back(std::move(logits));
  }
  return trace;
}

std::vector<float> confidence(const Tensor& logits) {
  check(logits.rank() >= 3 && logits.extent(1) == 2,
        "confidence: expected (batch, 2, positions...) logits");
  const int64_t B = logits.extent(0);
  int64_t S = 1;
  for (size_t ax = 2; ax < logits.rank(); ++ax) S *= logits.extent(ax);
  std::vector<float> out(static_cast<size_t>(B));
  const float* lv = logits.values().data();
  for (int64_t b = 0; b < B; ++b) {
    const float* l0 = lv + b * 2 * S;
    const float* l1 = l0 + S;
    double acc = 0.0;
    for (int64_t s = 0; s < S; ++s) {
      const double margin = std::abs(static_cast<double>(l1[s]) - l0[s]);
      acc += 1.0 / (1.0 + std::exp(-margin));  // softmax prob of argmax class
    }
    out[static_cast<size_t>(b)] = static_cast<float>(acc / static_cast<double>(S));
  }
  return out;
}

std::vector<int32_t> decode(const Tensor& logits) {
  check(logits.rank() >= 3 && logits.extent(1) == 2,
        "decode: expected (batch, 2, positions...) logits");
  const int64_t B = logits.extent(0);
  int64_t S = 1;
  for (size_t ax = 2; ax < logits.rank(); ++ax) S *= logits.extent(ax);
  std::vector<int32_t> out(static_cast<size_t>(B * S));
  const float* lv = logits.values().data();
  for (int64_t b = 0; b < B; ++b) {
    const float* l0 = lv + b * 2 * S;
    const float* l1 = l0 + S;
    for (int64_t s = 0; s < S; ++s)
      out[static_cast<size_t>(b * S + s)] = l1[s] > l0[s] ? 1 : 0;
  }
  return out;
}

bool exact_match(const Tensor& logits, const Labels& target, int64_t example) {
  const int64_t B = logits.extent(0);
  check(example >= 0 && example < B, "exact_match: example index out of range");
  int64_t S = 1;
  for (size_t ax = 2; ax < logits.rank(); ++ax) S *= logits.extent(ax);
  check(static_cast<int64_t>(target.values.size()) == B * S,
        "exact_match: target size mismatch");
  const float* l0 = logits.values().data() + example * 2 * S;
  const float* l1 = l0 + S;
  const int32_t* y = target.values.data() + example * S;
  for (int64_t s = 0; s < S; ++s) {
    if ((l1[s] > l0[s] ? 1 : 0) != y[s]) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}
void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const uint8_t* p;
  size_t left;
  const std::string& path;

  void need(size_t n, const char* what) {
    if (left < n) fail(path + ": truncated checkpoint while reading " + what);
  }
  uint8_t u8(const char* what) { need(1, what); --left; return *p++; }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(p[0] | (p[1] << 8));
    p += 2; left -= 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    p += 4; left -= 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    p += 8; left -= 8;
    return v;
  }
  void bytes(void* dst, size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, p, n);
    p += n; left -= n;
  }
};

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path,
                     uint64_t config_hash) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  put_u16(out, kCheckpointFormatVersion);
  out.push_back(static_cast<char>(state.spec.task));
  put_u32(out, static_cast<uint32_t>(state.spec.width));
  out.push_back(state.spec.recall ? 1 : 0);
  out.push_back(state.spec.feed_forward ? 1 : 0);
  put_u32(out, static_cast<uint32_t>(state.spec.max_iters));
  put_u32(out, static_cast<uint32_t>(state.spec.head_channels.size()));
  for (int c : state.spec.head_channels) put_u32(out, static_cast<uint32_t>(c));
  put_u64(out, config_hash);

  const auto named = state.named_parameters();
  put_u32(out, static_cast<uint32_t>(named.size()));
  for (const auto& [name, tensor] : named) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<uint32_t>(tensor.rank()));
    for (int64_t e : tensor.shape()) put_u32(out, static_cast<uint32_t>(e));
    const auto vals = tensor.values();
    out.append(reinterpret_cast<const char*>(vals.data()),
               vals.size() * sizeof(float));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail("save_checkpoint: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) fail("save_checkpoint: write failed for " + path);
}

ModelState load_checkpoint(const std::string& path, uint64_t* config_hash) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("load_checkpoint: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  Reader r{reinterpret_cast<const uint8_t*>(blob.data()), blob.size(), path};

  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    fail(path + ": bad magic, not a checkpoint");
  const uint16_t version = r.u16("version");
  if (version != kCheckpointFormatVersion)
    fail(path + ": checkpoint format version " + std::to_string(version) +
         ", expected " + std::to_string(kCheckpointFormatVersion));

  ModelSpec spec;
  const uint8_t task = r.u8("task");
  if (task > 1) fail(path + ": unknown task id");
  spec.task = static_cast<TaskKind>(task);
  spec.width = static_cast<int>(r.u32("width"));
  spec.recall = r.u8("recall flag") != 0;
  spec.feed_forward = r.u8("feed-forward flag") != 0;
  spec.max_iters = static_cast<int>(r.u32("max_iters"));
  const uint32_t head_n = r.u32("head size");
  for (uint32_t i = 0; i < head_n; ++i)
    spec.head_channels.push_back(static_cast<int>(r.u32("head channels")));
  const uint64_t hash = r.u64("config hash");
  if (config_hash) *config_hash = hash;

  ModelState state = make_structure(spec);
  auto named = state.named_parameters();
  const uint32_t count = r.u32("parameter count");
  if (count != named.size())
    fail(path + ": has " + std::to_string(count) + " parameters, expected " +
         std::to_string(named.size()));
  for (auto& [name, tensor] : named) {
    const uint32_t name_len = r.u32("name length");
    std::string got(name_len, '\0');
    r.bytes(got.data(), name_len, "name");
    if (got != name)
      fail(path + ": parameter '" + got + "' where '" + name + "' expected");
    const uint32_t rank = r.u32("rank");
    if (rank != tensor.rank())
      fail(path + ": parameter '" + name + "' rank mismatch");
    for (size_t ax = 0; ax < rank; ++ax) {
      const uint32_t e = r.u32("extent");
      if (static_cast<int64_t>(e) != tensor.extent(ax))
        fail(path + ": parameter '" + name + "' extent mismatch on axis " +
             std::to_string(ax));
    }
    auto vals = tensor.mutable_values();
    r.bytes(vals.data(), vals.size() * sizeof(float), "parameter data");
  }
  if (r.left != 0)
    fail(path + ": " + std::to_string(r.left) + " trailing bytes");
  return state;
}

}  // namespace dtlab
