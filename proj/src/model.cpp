#include "fgl/model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace fgl {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_hidden < 1 || d_latent < 1 || d_melody < 1 ||
      d_token_emb < 1 || n_tokens < 1 || max_frames < 1)
    throw std::invalid_argument("model config: all dimensions must be positive");
  if (d_hidden % n_heads != 0)
    throw std::invalid_argument("model config: d_hidden must be divisible by n_heads");
}

bool ModelConfig::operator==(const ModelConfig& o) const {
  return n_layers == o.n_layers && n_heads == o.n_heads && d_hidden == o.d_hidden &&
         d_latent == o.d_latent && d_melody == o.d_melody && d_token_emb == o.d_token_emb &&
         n_tokens == o.n_tokens && max_frames == o.max_frames;
}

ModelParams init_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  Rng rng(derive_seed(seed, 0xB001));
  const double rscale = 1.0 / std::sqrt(2.0 * config.n_layers);  // residual branches

  auto put = [&](const std::string& name, Shape s, double stddev) {
    p.tensors.emplace(name, stddev == 0.0 ? Tensor::zeros(s) : Tensor::randn(s, rng, stddev));
  };
  put("tok_table", Shape{config.n_tokens + 1, config.d_token_emb}, 1.0);
  put("mel_proj", Shape{config.d_melody, config.d_melody}, 1.0 / std::sqrt(config.d_melody));
  put("w_in", Shape{config.d_input(), config.d_hidden}, 1.0 / std::sqrt(config.d_input()));
  put("b_in", Shape{1, config.d_hidden}, 0.0);
  put("t_w", Shape{ModelConfig::d_time, config.d_hidden}, 1.0 / std::sqrt(ModelConfig::d_time));
  put("t_b", Shape{1, config.d_hidden}, 0.0);
  const double wh = 1.0 / std::sqrt(config.d_hidden);
  for (int l = 0; l < config.n_layers; l++) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    put(pre + "wq", Shape{config.d_hidden, config.d_hidden}, wh);
    put(pre + "wk", Shape{config.d_hidden, config.d_hidden}, wh);
    put(pre + "wv", Shape{config.d_hidden, config.d_hidden}, wh);
    put(pre + "wo", Shape{config.d_hidden, config.d_hidden}, wh * rscale);
    put(pre + "w1", Shape{config.d_hidden, config.d_ff()}, wh);
    put(pre + "b1", Shape{1, config.d_ff()}, 0.0);
    put(pre + "w2", Shape{config.d_ff(), config.d_hidden}, rscale / std::sqrt(config.d_ff()));
    put(pre + "b2", Shape{1, config.d_hidden}, 0.0);
  }
  put("w_out", Shape{config.d_hidden, config.d_latent}, wh);
  put("b_out", Shape{1, config.d_latent}, 0.0);
  return p;
}

NodeId append_velocity_graph(Graph& g, const ModelConfig& config, int frames) {
  config.validate();
  if (frames < 1 || frames > config.max_frames)
    throw std::invalid_argument("velocity graph: frame count outside [1, max_frames]");
  const int T = frames, H = config.d_hidden, dh = H / config.n_heads;

  const NodeId zt = g.leaf(kLeafZt, Shape{T, config.d_latent});
  const NodeId melody = g.leaf(kLeafMelody, Shape{T, config.d_melody});
  const NodeId onehot = g.leaf(kLeafOnehot, Shape{T, config.n_tokens + 1});
  const NodeId zctx = g.leaf(kLeafZctx, Shape{T, config.d_latent});
  const NodeId tfeat = g.leaf(kLeafTfeat, Shape{1, ModelConfig::d_time});

  const NodeId tok_e = g.matmul(onehot, g.leaf("tok_table", Shape{config.n_tokens + 1, config.d_token_emb}));
  const NodeId mel_e = g.matmul(melody, g.leaf("mel_proj", Shape{config.d_melody, config.d_melody}));
  const NodeId x = g.concat_last(g.concat_last(zt, mel_e), g.concat_last(tok_e, zctx));

  NodeId h = g.add(g.matmul(x, g.leaf("w_in", Shape{config.d_input(), H})),
                   g.repeat_rows(g.leaf("b_in", Shape{1, H}), T));
  const NodeId temb = g.add(g.matmul(tfeat, g.leaf("t_w", Shape{ModelConfig::d_time, H})),
                            g.leaf("t_b", Shape{1, H}));
  h = g.add(h, g.repeat_rows(temb, T));

  for (int l = 0; l < config.n_layers; l++) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    const NodeId hn = g.layernorm(h);
    const NodeId q = g.matmul(hn, g.leaf(pre + "wq", Shape{H, H}));
    const NodeId k = g.matmul(hn, g.leaf(pre + "wk", Shape{H, H}));
    const NodeId v = g.matmul(hn, g.leaf(pre + "wv", Shape{H, H}));
    NodeId heads = -1;
    for (int j = 0; j < config.n_heads; j++) {
      const NodeId qj = g.slice(q, 1, j * dh, dh);
      const NodeId kj = g.slice(k, 1, j * dh, dh);
      const NodeId vj = g.slice(v, 1, j * dh, dh);
      const NodeId scores = g.scalar_mul(g.matmul(qj, g.transpose(kj)), 1.0 / std::sqrt(double(dh)));
      const NodeId aj = g.matmul(g.softmax(scores), vj);
      heads = j == 0 ? aj : g.concat_last(heads, aj);
    }
    h = g.add(h, g.matmul(heads, g.leaf(pre + "wo", Shape{H, H})));

    const NodeId hn2 = g.layernorm(h);
    const NodeId a1 = g.add(g.matmul(hn2, g.leaf(pre + "w1", Shape{H, config.d_ff()})),
                            g.repeat_rows(g.leaf(pre + "b1", Shape{1, config.d_ff()}), T));
    const NodeId mlp = g.add(g.matmul(g.gelu(a1), g.leaf(pre + "w2", Shape{config.d_ff(), H})),
                             g.repeat_rows(g.leaf(pre + "b2", Shape{1, H}), T));
    h = g.add(h, mlp);
  }
  return g.add(g.matmul(g.layernorm(h), g.leaf("w_out", Shape{H, config.d_latent})),
               g.repeat_rows(g.leaf("b_out", Shape{1, config.d_latent}), T));
}

Tensor time_features(double t) {
  Tensor f(Shape{1, ModelConfig::d_time});
  double freq = 1.0;
  for (int k = 0; k < ModelConfig::d_time / 2; k++) {
    f.at(0, 2 * k) = std::sin(6.283185307179586476925287 * freq * t);
    f.at(0, 2 * k + 1) = std::cos(6.283185307179586476925287 * freq * t);
    freq *= 2.0;
  }
  return f;
}

Tensor tokens_onehot(const std::vector<int>& grid, int n_tokens) {
  Tensor oh(Shape{int(grid.size()), n_tokens + 1});
  for (size_t f = 0; f < grid.size(); f++) {
    const int id = grid[f];
    if (id < 0 || id > n_tokens) throw std::invalid_argument("tokens_onehot: id out of range");
    oh.at(int(f), id) = 1.0;
  }
  return oh;
}

void bind_params(Bindings& b, const ModelParams& params) {
  for (const auto& [name, tensor] : params.tensors) b[name] = &tensor;
}

namespace {

struct CachedNet {
  Graph graph;
  NodeId out = -1;
  std::unique_ptr<Tape> tape;
};

// thread-local so evaluation may fan out across instances; each thread
// builds its own graph copies, and aligned buffers keep results identical
CachedNet& cached_net(const ModelConfig& config, int frames) {
  static thread_local std::vector<std::pair<std::pair<ModelConfig, int>, std::unique_ptr<CachedNet>>> cache;
  for (auto& e : cache)
    if (e.first.second == frames && e.first.first == config) return *e.second;
  auto net = std::make_unique<CachedNet>();
  net->out = append_velocity_graph(net->graph, config, frames);
  net->tape = std::make_unique<Tape>(net->graph);
  cache.emplace_back(std::make_pair(config, frames), std::move(net));
  return *cache.back().second;
}

void check_velocity_args(const ModelParams& params, const Tensor& z_t, double t,
                         const ConditionBundle& cond) {
  if (z_t.shape.rank != 2 || z_t.shape.d[1] != params.config.d_latent)
    throw std::invalid_argument("velocity: z_t must be (T x d_latent)");
  const int T = z_t.shape.d[0];
  if (cond.frames() != T || cond.melody.shape.d[0] != T || cond.z_ctx.shape.d[0] != T)
    throw std::invalid_argument("velocity: condition frame count mismatch");
  if (cond.melody.shape.d[1] != params.config.d_melody ||
      cond.z_ctx.shape.d[1] != params.config.d_latent)
    throw std::invalid_argument("velocity: condition channel mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("velocity: t must be in [0,1]");
}

}  // namespace

Tensor velocity(const ModelParams& params, const Tensor& z_t, double t,
                const ConditionBundle& cond) {
  check_velocity_args(params, z_t, t, cond);
  CachedNet& net = cached_net(params.config, z_t.shape.d[0]);
  const Tensor onehot = tokens_onehot(cond.token_grid, params.config.n_tokens);
  const Tensor tfeat = time_features(t);
  Bindings b;
  bind_params(b, params);
  b[kLeafZt] = &z_t;
  b[kLeafMelody] = &cond.melody;
  b[kLeafOnehot] = &onehot;
  b[kLeafZctx] = &cond.z_ctx;
  b[kLeafTfeat] = &tfeat;
  return net.tape->forward(b, net.out);
}

ConditionBundle uncond_bundle(const ConditionBundle& cond) {
  ConditionBundle u = cond;
  u.melody = Tensor::zeros(cond.melody.shape);
  u.token_grid.assign(cond.token_grid.size(), 0);
  return u;
}

Tensor velocity_cfg(const ModelParams& params, const Tensor& z_t, double t,
                    const ConditionBundle& cond, double cfg_scale) {
  if (cfg_scale == 1.0) return velocity(params, z_t, t, cond);
  const ConditionBundle u = uncond_bundle(cond);
  if (cfg_scale == 0.0) return velocity(params, z_t, t, u);
  const Tensor vc = velocity(params, z_t, t, cond);
  Tensor vu = velocity(params, z_t, t, u);
  for (int64_t i = 0; i < vu.numel(); i++)
    vu.data[size_t(i)] += cfg_scale * (vc.data[size_t(i)] - vu.data[size_t(i)]);
  return vu;
}

// ------------------------------ checkpoints ---------------------------------

namespace {

constexpr char kMagic[4] = {'F', 'G', 'L', '1'};

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("checkpoint: truncated");
  return v;
}
uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("checkpoint: truncated");
  return v;
}

nlohmann::json config_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_hidden", c.d_hidden},     {"d_latent", c.d_latent},
          {"d_melody", c.d_melody},     {"d_token_emb", c.d_token_emb},
          {"n_tokens", c.n_tokens},     {"max_frames", c.max_frames}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_hidden = j.at("d_hidden").get<int>();
  c.d_latent = j.at("d_latent").get<int>();
  c.d_melody = j.at("d_melody").get<int>();
  c.d_token_emb = j.at("d_token_emb").get<int>();
  c.n_tokens = j.at("n_tokens").get<int>();
  c.max_frames = j.at("max_frames").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  write_u32(os, params.version);
  nlohmann::json head{{"config", config_json(params.config)}, {"meta", params.meta}};
  const std::string head_s = head.dump();  // std::map keys: deterministic order
  write_u64(os, head_s.size());
  os.write(head_s.data(), std::streamsize(head_s.size()));
  write_u64(os, params.tensors.size());
  for (const auto& [name, t] : params.tensors) {
    write_u64(os, name.size());
    os.write(name.data(), std::streamsize(name.size()));
    write_u32(os, uint32_t(t.shape.rank));
    for (int i = 0; i < t.shape.rank; i++) write_u32(os, uint32_t(t.shape.d[i]));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             std::streamsize(t.data.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  ModelParams p;
  p.version = read_u32(is);
  if (p.version != 1) throw std::runtime_error("checkpoint: unsupported version");
  const uint64_t head_len = read_u64(is);
  std::string head_s(head_len, '\0');
  if (!is.read(head_s.data(), std::streamsize(head_len)))
    throw std::runtime_error("checkpoint: truncated");
  nlohmann::json head = nlohmann::json::parse(head_s);
  p.config = config_from_json(head.at("config"));
  p.meta = head.at("meta").get<std::map<std::string, std::string>>();
  const uint64_t n_tensors = read_u64(is);
  for (uint64_t k = 0; k < n_tensors; k++) {
    const uint64_t name_len = read_u64(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), std::streamsize(name_len)))
      throw std::runtime_error("checkpoint: truncated");
    const uint32_t rank = read_u32(is);
    if (rank < 1 || rank > 3) throw std::runtime_error("checkpoint: bad tensor rank");
    std::vector<int> dims;
    for (uint32_t i = 0; i < rank; i++) dims.push_back(int(read_u32(is)));
    Shape s = rank == 1 ? Shape{dims[0]}
              : rank == 2 ? Shape{dims[0], dims[1]}
                          : Shape{dims[0], dims[1], dims[2]};
    Tensor t(s);
    if (!is.read(reinterpret_cast<char*>(t.data.data()),
                 std::streamsize(t.data.size() * sizeof(double))))
      throw std::runtime_error("checkpoint: truncated tensor data");
    for (double v : t.data)
      if (!std::isfinite(v)) throw std::runtime_error("checkpoint: non-finite value in " + name);
    if (!p.tensors.emplace(name, std::move(t)).second)
      throw std::runtime_error("checkpoint: duplicate tensor " + name);
  }
  return p;
}

}  // namespace fgl
