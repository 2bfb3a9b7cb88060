#include "se2/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "se2/rng.hpp"
#include "se2/tensor_io.hpp"

namespace se2 {

namespace {

struct WidthTable {
  int input_size;
  int input_channels;
  std::vector<int> kernels;
  std::vector<int> pools;
  std::vector<int> concats;
  std::map<int, std::vector<int>> widths;  // N -> per-block out channels
  Projection projection;
  HeadSpec head;
};

const WidthTable& table_for(const std::string& task) {
  static const std::map<std::string, WidthTable> tables = {
      {"mitosis",
       {68,
        3,
        {5, 5, 5, 5, 1},
        {2, 2, 2, 1, 1},
        {0, 0, 0, 0, 0},
        {{1, {16, 16, 16, 64, 16}},
         {4, {10, 10, 10, 16, 16}},
         {8, {8, 8, 8, 8, 16}},
         {16, {6, 6, 6, 4, 16}}},
        Projection::max,
        {1, HeadActivation::sigmoid}}},
      {"tumor",
       {88,
        3,
        {5, 5, 5, 5, 1},
        {2, 2, 3, 1, 1},
        {0, 0, 0, 0, 0},
        {{1, {32, 32, 32, 64, 16}},
         {4, {19, 19, 19, 16, 16}},
         {8, {14, 14, 14, 8, 16}},
         {16, {10, 10, 10, 4, 16}}},
        Projection::mean,
        {1, HeadActivation::sigmoid}}},
      {"nuclei",
       {60,
        3,
        {5, 5, 5, 5, 5, 1},
        {2, 2, 1, 1, 1, 1},
        {0, 0, 0, 2, 1, 0},
        {{1, {16, 16, 16, 16, 64, 16}},
         {4, {10, 10, 10, 10, 16, 16}},
         {8, {8, 8, 8, 8, 8, 16}},
         {16, {6, 6, 6, 6, 4, 16}}},
        Projection::max,
        {3, HeadActivation::softmax}}},
      // Desk-scale analog of the mitosis architecture for the synthetic
      // oriented-pattern task; widths chosen to keep totals within ~1-6%
      // across N.
      {"synth-cls",
       {32,
        1,
        {5, 5, 5},
        {2, 2, 1},
        {0, 0, 0},
        {{1, {16, 16, 80}}, {4, {10, 12, 20}}, {8, {8, 8, 16}}, {16, {6, 6, 10}}},
        Projection::max,
        {1, HeadActivation::sigmoid}}},
  };
  auto it = tables.find(task);
  if (it == tables.end()) throw ConfigError("unknown preset task: " + task);
  return it->second;
}

}  // namespace

ModelConfig preset_config(const std::string& task, int num_orientations, bool table_affine_head) {
  const WidthTable& t = table_for(task);
  auto wit = t.widths.find(num_orientations);
  if (wit == t.widths.end())
    throw ConfigError("preset " + task + " has no N=" + std::to_string(num_orientations) +
                      " column (choose 1, 4, 8 or 16)");
  ModelConfig cfg;
  cfg.task = task;
  cfg.num_orientations = num_orientations;
  cfg.input_size = t.input_size;
  cfg.input_channels = t.input_channels;
  cfg.blocks.clear();
  for (std::size_t i = 0; i < t.kernels.size(); ++i) {
    BlockSpec b;
    b.type = i == 0 ? KernelKind::lifting : KernelKind::group;
    b.out_channels = wit->second[i];
    b.kernel = t.kernels[i];
    b.pool = t.pools[i];
    b.concat_from = t.concats[i];
    cfg.blocks.push_back(b);
  }
  cfg.projection = t.projection;
  cfg.head = t.head;
  cfg.table_affine_head = table_affine_head;
  return cfg;
}

namespace {

void validate_config(const ModelConfig& cfg) {
  if (cfg.blocks.empty()) throw ConfigError("model needs at least one block");
  if (cfg.blocks.front().type != KernelKind::lifting)
    throw ConfigError("the first layer must be a lifting layer (group layer before lifting)");
  for (std::size_t i = 1; i < cfg.blocks.size(); ++i)
    if (cfg.blocks[i].type == KernelKind::lifting)
      throw ConfigError("lifting layer allowed only as the first layer (block " +
                        std::to_string(i + 1) + ")");
  if (!cfg.projection.has_value())
    throw ConfigError("a projection layer is required before the head");
  if (cfg.num_orientations < 1) throw ConfigError("orientation count must be >= 1");
  if (cfg.input_channels < 1) throw ConfigError("input channel count must be >= 1");
  if (cfg.head.classes < 1) throw ConfigError("head needs at least one class");
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const BlockSpec& b = cfg.blocks[i];
    if (b.kernel != 1 && b.kernel % 2 == 0)
      throw ConfigError("block " + std::to_string(i + 1) + ": kernel size must be odd");
    if (b.pool < 1) throw ConfigError("block " + std::to_string(i + 1) + ": pool must be >= 1");
    if (b.concat_from < 0 || b.concat_from > static_cast<int>(i))
      throw ConfigError("block " + std::to_string(i + 1) + ": concat source " +
                        std::to_string(b.concat_from) + " must name an earlier block");
  }
}

}  // namespace

template <class T>
ModelT<T> ModelT<T>::build(const ModelConfig& config, std::uint64_t seed) {
  validate_config(config);
  ModelT<T> m;
  m.config = config;
  int cin = config.input_channels;
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const BlockSpec& spec = config.blocks[i];
    ConvBlock<T> block;
    block.spec = spec;
    const double radius = spec.kernel == 1 ? 0.5 : config.mask_radius;
    // Skip concat widens the conv input by the source block's channels.
    if (spec.concat_from > 0)
      cin += config.blocks[static_cast<std::size_t>(spec.concat_from - 1)].out_channels;
    block.kernels = KernelBase<T>::make(spec.type, spec.kernel, config.num_orientations, cin,
                                        spec.out_channels, radius);
    block.bn = BatchNorm<T>(spec.out_channels);
    // He-style uniform init with fan-in over active mask positions (and
    // input orientations for group kernels).
    const int fan_in = block.kernels.mask.active_count() *
                       (spec.type == KernelKind::group ? config.num_orientations : 1) * cin;
    const double limit = std::sqrt(6.0 / fan_in);
    Rng rng = Rng::keyed(seed, i);
    const int nn = spec.kernel * spec.kernel;
    const std::size_t blocksz = block.kernels.base.value.size() / static_cast<std::size_t>(nn);
    for (int t = 0; t < nn; ++t) {
      if (!block.kernels.mask.active_flat(t)) continue;
      T* v = block.kernels.base.value.data() + static_cast<std::size_t>(t) * blocksz;
      for (std::size_t q = 0; q < blocksz; ++q) v[q] = static_cast<T>(rng.uniform(-limit, limit));
    }
    block.kernels.derive();
    m.blocks.push_back(std::move(block));
    cin = spec.out_channels;
  }
  m.head = FcHead<T>(cin, config.head.classes, config.head.activation, config.table_affine_head);
  Rng rng = Rng::keyed(seed, 1000);
  const double limit = std::sqrt(6.0 / cin);
  for (std::size_t q = 0; q < m.head.weights.value.size(); ++q)
    m.head.weights.value[q] = static_cast<T>(rng.uniform(-limit, limit));
  return m;
}

template <class T>
int ModelT<T>::receptive_field() const {
  // Forward walk: each op contributes (k-1) times the stride of its input
  // grid in input pixels; upsampling halves that stride.
  double rf = 1.0, stride = 1.0;
  for (const auto& blk : blocks) {
    const BlockSpec& b = blk.spec;
    if (b.concat_from > 0) stride /= 2.0;
    rf += (b.kernel - 1) * stride;
    if (b.pool > 1) {
      rf += (b.pool - 1) * stride;
      stride *= b.pool;
    }
  }
  return static_cast<int>(std::lround(rf));
}

template <class T>
int ModelT<T>::min_input_extent() const {
  // Smallest square input yielding at least a 1x1 output map.
  int size = 1;
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
    const BlockSpec& b = it->spec;
    if (b.pool > 1) size *= b.pool;
    size += b.kernel - 1;
    if (b.concat_from > 0) size = (size + 1) / 2;
  }
  return size;
}

template <class T>
TensorT<T> ModelT<T>::forward(const TensorT<T>& input, bool training) {
  if (input.rank() != 4)
    throw ConfigError("model forward: input must be [B,H,W,C], got " + input.shape_str());
  if (input.dim(3) != config.input_channels)
    throw ConfigError("model forward: expected " + std::to_string(config.input_channels) +
                      " input channels, got " + std::to_string(input.dim(3)));
  const int need = min_input_extent();
  if (input.dim(1) < need || input.dim(2) < need)
    throw ConfigError("model forward: input extent " + std::to_string(input.dim(1)) + "x" +
                      std::to_string(input.dim(2)) + " below the required extent " +
                      std::to_string(need));
  input_stash_ = input;
  const TensorT<T>* cur = &input_stash_;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    ConvBlock<T>& blk = blocks[i];
    const TensorT<T>* conv_in = cur;
    if (blk.spec.concat_from > 0) {
      blk.uc = upsample_concat(*cur, blocks[static_cast<std::size_t>(blk.spec.concat_from - 1)].act);
      conv_in = &blk.uc.output;
    }
    blk.pre_bn = blk.spec.type == KernelKind::lifting ? lifting_forward(*conv_in, blk.kernels)
                                                      : group_conv_forward(*conv_in, blk.kernels);
    blk.bn_out = blk.bn.forward(blk.pre_bn, training);
    blk.act = relu(blk.bn_out);
    if (blk.spec.pool > 1) blk.pooled = se2_maxpool_spatial(blk.act, blk.spec.pool);
    cur = &blk.output();
    debug_check_finite(*cur, "block activation");
  }
  proj_ = projection(*cur, *config.projection);
  return head.forward(proj_.output);
}

template <class T>
TensorT<T> ModelT<T>::backward(const TensorT<T>& grad_pred) {
  TensorT<T> g2d = head.backward(grad_pred);
  TensorT<T> g(blocks.back().output().shape());
  projection_backward(proj_, config.num_orientations, g2d, &g);

  std::vector<TensorT<T>> skip_grad(blocks.size());
  for (std::size_t ri = blocks.size(); ri-- > 0;) {
    ConvBlock<T>& blk = blocks[ri];
    TensorT<T> g_pre;
    if (blk.spec.pool > 1) {
      g_pre = TensorT<T>(blk.act.shape());
      maxpool2d_backward(blk.pooled, g, &g_pre);
    } else {
      g_pre = std::move(g);
    }
    if (skip_grad[ri].size() > 0)
      for (std::size_t q = 0; q < g_pre.size(); ++q) g_pre[q] += skip_grad[ri][q];

    TensorT<T> g_bn(blk.bn_out.shape());
    relu_backward(blk.bn_out, g_pre, &g_bn);
    TensorT<T> g_conv_out = blk.bn.backward(g_bn);

    const TensorT<T>* conv_in;
    if (blk.spec.concat_from > 0)
      conv_in = &blk.uc.output;
    else if (ri == 0)
      conv_in = &input_stash_;
    else
      conv_in = &blocks[ri - 1].output();

    TensorT<T> g_conv_in(conv_in->shape());
    if (blk.spec.type == KernelKind::lifting)
      lifting_backward(*conv_in, blk.kernels, g_conv_out, &g_conv_in);
    else
      group_conv_backward(*conv_in, blk.kernels, g_conv_out, &g_conv_in);

    if (blk.spec.concat_from > 0) {
      const std::size_t src = static_cast<std::size_t>(blk.spec.concat_from - 1);
      TensorT<T> g_prev(blocks[ri - 1].output().shape());
      if (skip_grad[src].size() == 0) skip_grad[src] = TensorT<T>(blocks[src].act.shape());
      upsample_concat_backward(blk.uc, g_conv_in, &g_prev, &skip_grad[src]);
      g = std::move(g_prev);
    } else if (ri == 0) {
      return g_conv_in;  // gradient w.r.t. the input image
    } else {
      g = std::move(g_conv_in);
    }
  }
  throw DiagnosticError("model backward: unreachable");
}

template <class T>
SE2ImageT<T> ModelT<T>::forward_prefix(const TensorT<T>& input, int num_blocks,
                                       bool include_pool) {
  if (num_blocks < 1 || num_blocks > static_cast<int>(blocks.size()))
    throw ConfigError("forward_prefix: block count out of range");
  TensorT<T> cur;
  const TensorT<T>* src = &input;
  for (int i = 0; i < num_blocks; ++i) {
    ConvBlock<T>& blk = blocks[static_cast<std::size_t>(i)];
    if (blk.spec.concat_from > 0)
      throw ConfigError("forward_prefix: prefixes with skip concats are not supported");
    TensorT<T> z = blk.spec.type == KernelKind::lifting ? lifting_forward(*src, blk.kernels)
                                                        : group_conv_forward(*src, blk.kernels);
    TensorT<T> a = relu(blk.bn.forward(z, false));
    if (include_pool && blk.spec.pool > 1) a = se2_maxpool_spatial(a, blk.spec.pool).output;
    cur = std::move(a);
    src = &cur;
  }
  return {std::move(cur), config.num_orientations, num_blocks};
}

template <class T>
std::vector<typename ModelT<T>::ParamRef> ModelT<T>::params() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string base = "block" + std::to_string(i + 1);
    out.push_back({&blocks[i].kernels.base, true, base + "_kernel"});
    out.push_back({&blocks[i].bn.gamma, false, base + "_bn_gamma"});
    out.push_back({&blocks[i].bn.beta, false, base + "_bn_beta"});
  }
  out.push_back({&head.weights, true, "head_weights"});
  if (head.affine) {
    out.push_back({&head.gamma, false, "head_gamma"});
    out.push_back({&head.beta, false, "head_beta"});
  } else {
    out.push_back({&head.bias, false, "head_bias"});
  }
  return out;
}

template <class T>
std::vector<typename ModelT<T>::LayerCount> ModelT<T>::param_breakdown() const {
  std::vector<LayerCount> rows;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const ConvBlock<T>& b = blocks[i];
    std::ostringstream name;
    name << "block" << (i + 1) << " "
         << (b.spec.type == KernelKind::lifting ? "lifting" : "group") << " " << b.spec.kernel
         << "x" << b.spec.kernel << " -> " << b.spec.out_channels << " (+BN)";
    rows.push_back({name.str(),
                    static_cast<long long>(b.kernels.param_count()) + 2LL * b.spec.out_channels});
  }
  std::ostringstream hname;
  hname << "head 1x1 -> " << config.head.classes
        << (config.head.activation == HeadActivation::sigmoid ? " sigmoid" : " softmax");
  rows.push_back({hname.str(), static_cast<long long>(head.param_count())});
  return rows;
}

template <class T>
long long ModelT<T>::param_total() const {
  long long total = 0;
  for (const auto& row : param_breakdown()) total += row.count;
  return total;
}

template <class T>
void ModelT<T>::zero_grads() {
  for (auto& ref : params()) ref.p->zero_grad();
}

template <class T>
void ModelT<T>::refresh_banks() {
  for (auto& blk : blocks) {
    blk.kernels.apply_mask();
    blk.kernels.derive();
  }
}

std::string encode_blocks(const std::vector<BlockSpec>& blocks) {
  std::ostringstream os;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) os << ",";
    os << (blocks[i].type == KernelKind::lifting ? "lifting" : "group") << ":"
       << blocks[i].out_channels << ":" << blocks[i].kernel << ":" << blocks[i].pool << ":"
       << blocks[i].concat_from;
  }
  return os.str();
}

std::vector<BlockSpec> decode_blocks(const std::string& text) {
  std::vector<BlockSpec> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    std::istringstream fs(item);
    std::string type;
    BlockSpec b;
    std::getline(fs, type, ':');
    b.type = type == "lifting" ? KernelKind::lifting : KernelKind::group;
    std::string tok;
    std::getline(fs, tok, ':');
    b.out_channels = std::stoi(tok);
    std::getline(fs, tok, ':');
    b.kernel = std::stoi(tok);
    std::getline(fs, tok, ':');
    b.pool = std::stoi(tok);
    std::getline(fs, tok, ':');
    b.concat_from = std::stoi(tok);
    out.push_back(b);
  }
  return out;
}

template <class T>
void ModelT<T>::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt");
  if (!man) throw DataError("cannot write manifest: " + (dir / "manifest.txt").string());
  man << "task=" << config.task << "\n";
  man << "n=" << config.num_orientations << "\n";
  man << "input_size=" << config.input_size << "\n";
  man << "input_channels=" << config.input_channels << "\n";
  man << "kernel_size=" << config.kernel_size << "\n";
  man << "mask_radius=" << config.mask_radius << "\n";
  man << "projection=" << (*config.projection == Projection::max ? "max" : "mean") << "\n";
  man << "head_classes=" << config.head.classes << "\n";
  man << "head_activation="
      << (config.head.activation == HeadActivation::sigmoid ? "sigmoid" : "softmax") << "\n";
  man << "table_affine_head=" << (config.table_affine_head ? 1 : 0) << "\n";
  man << "blocks=" << encode_blocks(config.blocks) << "\n";

  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "b" + std::to_string(i);
    write_se2t(dir / (p + "_base.se2t"), blocks[i].kernels.base.value.template cast<float>());
    write_se2t(dir / (p + "_bn_gamma.se2t"), blocks[i].bn.gamma.value.template cast<float>());
    write_se2t(dir / (p + "_bn_beta.se2t"), blocks[i].bn.beta.value.template cast<float>());
    write_se2t(dir / (p + "_bn_rmean.se2t"), blocks[i].bn.running_mean.template cast<float>());
    write_se2t(dir / (p + "_bn_rvar.se2t"), blocks[i].bn.running_var.template cast<float>());
  }
  write_se2t(dir / "head_w.se2t", head.weights.value.template cast<float>());
  if (head.affine) {
    write_se2t(dir / "head_gamma.se2t", head.gamma.value.template cast<float>());
    write_se2t(dir / "head_beta.se2t", head.beta.value.template cast<float>());
  } else {
    write_se2t(dir / "head_b.se2t", head.bias.value.template cast<float>());
  }
}

template <class T>
ModelT<T> ModelT<T>::load(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw DataError("cannot open checkpoint manifest: " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(man, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  ModelConfig cfg;
  cfg.task = kv.at("task");
  cfg.num_orientations = std::stoi(kv.at("n"));
  cfg.input_size = std::stoi(kv.at("input_size"));
  cfg.input_channels = std::stoi(kv.at("input_channels"));
  cfg.kernel_size = std::stoi(kv.at("kernel_size"));
  cfg.mask_radius = std::stod(kv.at("mask_radius"));
  cfg.projection = kv.at("projection") == "max" ? Projection::max : Projection::mean;
  cfg.head.classes = std::stoi(kv.at("head_classes"));
  cfg.head.activation =
      kv.at("head_activation") == "sigmoid" ? HeadActivation::sigmoid : HeadActivation::softmax;
  cfg.table_affine_head = kv.at("table_affine_head") == "1";
  cfg.blocks = decode_blocks(kv.at("blocks"));

  ModelT<T> m = build(cfg, 0);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "b" + std::to_string(i);
    m.blocks[i].kernels.base.value = read_se2t(dir / (p + "_base.se2t")).template cast<T>();
    m.blocks[i].bn.gamma.value = read_se2t(dir / (p + "_bn_gamma.se2t")).template cast<T>();
    m.blocks[i].bn.beta.value = read_se2t(dir / (p + "_bn_beta.se2t")).template cast<T>();
    m.blocks[i].bn.running_mean = read_se2t(dir / (p + "_bn_rmean.se2t")).template cast<T>();
    m.blocks[i].bn.running_var = read_se2t(dir / (p + "_bn_rvar.se2t")).template cast<T>();
  }
  m.head.weights.value = read_se2t(dir / "head_w.se2t").template cast<T>();
  if (m.head.affine) {
    m.head.gamma.value = read_se2t(dir / "head_gamma.se2t").template cast<T>();
    m.head.beta.value = read_se2t(dir / "head_beta.se2t").template cast<T>();
  } else {
    m.head.bias.value = read_se2t(dir / "head_b.se2t").template cast<T>();
  }
  m.refresh_banks();
  return m;
}

template class ModelT<float>;
template class ModelT<double>;

}  // namespace se2
