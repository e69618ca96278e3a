#include "vmmc/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "vmmc/nn/losses.hpp"
#include "vmmc/nn/optim.hpp"
#include "vmmc/nn/state.hpp"

namespace vmmc {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void add_conv_bn(nn::Sequential& seq, const std::string& prefix, int in, int filters, int kernel,
                 int stride, bool relu) {
  nn::Conv2DOptions o;
  o.in_channels = in;
  o.filters = filters;
  o.kernel = kernel;
  o.stride = stride;
  o.padding = kernel / 2;
  seq.add<nn::Conv2D>(prefix + "/conv", o);
  seq.add<nn::BatchNorm>(prefix + "/bn", filters);
  if (relu) seq.add<nn::ReLU>(prefix + "/relu");
}

// relu(sum) backward: the rectifier mask comes from the block output.
nn::Tensor rectified_grad(const nn::Tensor& output, const nn::Tensor& grad_out) {
  nn::Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.data()[i] = output.data()[i] > 0.0f ? grad_out.data()[i] : 0.0f;
  }
  return g;
}

void rectify_in_place(nn::Tensor& t) {
  for (float& v : t.values()) v = v > 0.0f ? v : 0.0f;
}

}  // namespace

// ---------------------------------------------------------------- blocks

IdentityBlock::IdentityBlock(std::string name, int in_channels, IdentityBlockSpec spec)
    : nn::Layer(std::move(name)), main_(this->name() + "/main") {
  for (int f : spec.filters) {
    if (f <= 0) throw std::invalid_argument(this->name() + ": filter counts must be positive");
  }
  if (spec.filters[2] != in_channels) {
    throw std::invalid_argument(this->name() + ": third section has " +
                                std::to_string(spec.filters[2]) + " filters but the input has " +
                                std::to_string(in_channels) + " channels");
  }
  add_conv_bn(main_, this->name() + "/a", in_channels, spec.filters[0], 1, 1, true);
  add_conv_bn(main_, this->name() + "/b", spec.filters[0], spec.filters[1], spec.kernel, 1, true);
  add_conv_bn(main_, this->name() + "/c", spec.filters[1], spec.filters[2], 1, 1, false);
}

nn::Tensor IdentityBlock::forward(const nn::Tensor& x, nn::Mode mode) {
  nn::Tensor y = main_.forward(x, mode);
  y += x;
  rectify_in_place(y);
  if (mode == nn::Mode::train) output_ = y;
  return y;
}

nn::Tensor IdentityBlock::backward(const nn::Tensor& grad_out) {
  const nn::Tensor g = rectified_grad(output_, grad_out);
  nn::Tensor dx = main_.backward(g);
  dx += g;
  return dx;
}

nn::Shape IdentityBlock::output_shape(const nn::Shape& in) const {
  const nn::Shape out = main_.output_shape(in);
  if (!(out == in)) throw std::invalid_argument(name() + ": block does not preserve shape");
  return out;
}

void IdentityBlock::collect_parameters(std::vector<nn::Parameter*>& out) { main_.collect_parameters(out); }
void IdentityBlock::collect_buffers(std::vector<nn::Buffer>& out) { main_.collect_buffers(out); }
void IdentityBlock::initialize(std::mt19937_64& rng) { main_.initialize(rng); }

ConvBlock::ConvBlock(std::string name, int in_channels, ConvBlockSpec spec)
    : nn::Layer(std::move(name)), main_(this->name() + "/main"), shortcut_(this->name() + "/shortcut") {
  for (int f : spec.filters) {
    if (f <= 0) throw std::invalid_argument(this->name() + ": filter counts must be positive");
  }
  if (spec.filters[0] != spec.filters[1]) {
    throw std::invalid_argument(this->name() + ": first and second sections must share a filter count");
  }
  if (spec.stride <= 0) throw std::invalid_argument(this->name() + ": stride must be positive");
  add_conv_bn(main_, this->name() + "/a", in_channels, spec.filters[0], 1, spec.stride, true);
  add_conv_bn(main_, this->name() + "/b", spec.filters[0], spec.filters[1], spec.kernel, 1, true);
  add_conv_bn(main_, this->name() + "/c", spec.filters[1], spec.filters[2], 1, 1, false);
  add_conv_bn(shortcut_, this->name() + "/proj", in_channels, spec.shortcut_filters(), 1, spec.stride,
              false);
}

nn::Tensor ConvBlock::forward(const nn::Tensor& x, nn::Mode mode) {
  nn::Tensor y = main_.forward(x, mode);
  y += shortcut_.forward(x, mode);
  rectify_in_place(y);
  if (mode == nn::Mode::train) output_ = y;
  return y;
}

nn::Tensor ConvBlock::backward(const nn::Tensor& grad_out) {
  const nn::Tensor g = rectified_grad(output_, grad_out);
  nn::Tensor dx = main_.backward(g);
  dx += shortcut_.backward(g);
  return dx;
}

nn::Shape ConvBlock::output_shape(const nn::Shape& in) const {
  const nn::Shape a = main_.output_shape(in);
  const nn::Shape b = shortcut_.output_shape(in);
  if (!(a == b)) throw std::invalid_argument(name() + ": branch shapes disagree");
  return a;
}

void ConvBlock::collect_parameters(std::vector<nn::Parameter*>& out) {
  main_.collect_parameters(out);
  shortcut_.collect_parameters(out);
}
void ConvBlock::collect_buffers(std::vector<nn::Buffer>& out) {
  main_.collect_buffers(out);
  shortcut_.collect_buffers(out);
}
void ConvBlock::initialize(std::mt19937_64& rng) {
  main_.initialize(rng);
  shortcut_.initialize(rng);
}

// ---------------------------------------------------------------- network spec

NetworkSpec NetworkSpec::reference() {
  NetworkSpec s;
  s.stages = {
      {{{16, 16, 32}, 3, 2}, 1},
      {{{32, 32, 64}, 3, 2}, 1},
      {{{80, 80, 320}, 3, 2}, 1},
      {{{144, 144, 576}, 3, 2}, 1},
  };
  return s;
}

void NetworkSpec::validate() const {
  if (stem_filters <= 0 || stem_kernel <= 0 || stem_stride <= 0 || stem_padding < 0) {
    throw std::invalid_argument("network: invalid stem");
  }
  if (pool_window < 0 || (pool_window > 0 && pool_stride <= 0)) {
    throw std::invalid_argument("network: invalid pooling");
  }
  if (stages.empty()) throw std::invalid_argument("network: no stages");
  if (classes < 2) throw std::invalid_argument("network: need at least two classes");
  for (const auto& st : stages) {
    if (st.identity_blocks < 0) throw std::invalid_argument("network: negative identity block count");
    if (st.conv.filters[0] != st.conv.filters[1]) {
      throw std::invalid_argument("network: inconsistent filter plan, conv block sections 1 and 2 differ");
    }
    for (int f : st.conv.filters) {
      if (f <= 0) throw std::invalid_argument("network: inconsistent filter plan, non-positive filters");
    }
  }
}

int NetworkSpec::depth() const {
  int d = 2;
  for (const auto& st : stages) d += 4 + 3 * st.identity_blocks;
  return d;
}

void to_json(json& j, const NetworkSpec& s) {
  json stages = json::array();
  for (const auto& st : s.stages) {
    stages.push_back({{"filters", st.conv.filters}, {"kernel", st.conv.kernel},
                      {"stride", st.conv.stride}, {"identity_blocks", st.identity_blocks}});
  }
  j = {{"stem_filters", s.stem_filters}, {"stem_kernel", s.stem_kernel},
       {"stem_stride", s.stem_stride},   {"stem_padding", s.stem_padding},
       {"pool_window", s.pool_window},   {"pool_stride", s.pool_stride},
       {"stages", stages},               {"classes", s.classes}};
}

void from_json(const json& j, NetworkSpec& s) {
  s.stem_filters = j.at("stem_filters");
  s.stem_kernel = j.at("stem_kernel");
  s.stem_stride = j.at("stem_stride");
  s.stem_padding = j.at("stem_padding");
  s.pool_window = j.at("pool_window");
  s.pool_stride = j.at("pool_stride");
  s.classes = j.at("classes");
  s.stages.clear();
  for (const auto& st : j.at("stages")) {
    StageSpec stage;
    stage.conv.filters = st.at("filters").get<std::array<int, 3>>();
    stage.conv.kernel = st.at("kernel");
    stage.conv.stride = st.at("stride");
    stage.identity_blocks = st.at("identity_blocks");
    s.stages.push_back(stage);
  }
}

// ---------------------------------------------------------------- network

ClassifierNetwork::ClassifierNetwork(NetworkSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), body_(std::make_unique<nn::Sequential>("resnet")) {
  spec_.validate();
  if (spec_.stem_padding > 0) body_->add<nn::ZeroPad2D>("stem/pad", spec_.stem_padding);
  nn::Conv2DOptions stem;
  stem.in_channels = 3;
  stem.filters = spec_.stem_filters;
  stem.kernel = spec_.stem_kernel;
  stem.stride = spec_.stem_stride;
  body_->add<nn::Conv2D>("stem/conv", stem);
  body_->add<nn::BatchNorm>("stem/bn", spec_.stem_filters);
  body_->add<nn::ReLU>("stem/relu");
  if (spec_.pool_window > 0) body_->add<nn::MaxPool2D>("stem/pool", spec_.pool_window, spec_.pool_stride);

  int channels = spec_.stem_filters;
  for (std::size_t s = 0; s < spec_.stages.size(); ++s) {
    const StageSpec& st = spec_.stages[s];
    const std::string prefix = "stage" + std::to_string(s + 1);
    body_->add<ConvBlock>(prefix + "/conv_block", channels, st.conv);
    channels = st.conv.shortcut_filters();
    for (int i = 0; i < st.identity_blocks; ++i) {
      IdentityBlockSpec id{{st.conv.filters[0], st.conv.filters[1], channels}, st.conv.kernel};
      body_->add<IdentityBlock>(prefix + "/identity_block" + std::to_string(i + 1), channels, id);
    }
  }
  body_->add<nn::GlobalAvgPool>("head/pool");
  body_->add<nn::Dense>("head/dense", channels, spec_.classes);
  std::mt19937_64 rng(seed);
  body_->initialize(rng);
}

nn::Tensor ClassifierNetwork::forward(const nn::Tensor& batch, nn::Mode mode) {
  if (batch.shape().c != 3) {
    throw std::invalid_argument("classifier: expected 3-channel input, got " + nn::to_string(batch.shape()));
  }
  return body_->forward(batch, mode);
}

nn::Tensor ClassifierNetwork::backward(const nn::Tensor& grad_logits) { return body_->backward(grad_logits); }

std::size_t ClassifierNetwork::trainable_parameter_count() { return nn::trainable_count(parameters()); }

// ---------------------------------------------------------------- scores

ClassScores::ClassScores(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw std::invalid_argument("ClassScores: empty");
  double total = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("ClassScores: probability outside [0,1]");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-5) throw std::invalid_argument("ClassScores: probabilities must sum to 1");
}

ClassScores ClassScores::from_logits(std::span<const float> logits) {
  std::vector<double> z(logits.begin(), logits.end());
  std::vector<double> p(z.size());
  nn::softmax<double>(z, p);
  return ClassScores(std::move(p));
}

std::vector<std::pair<int, double>> ClassScores::entries() const {
  std::vector<std::pair<int, double>> out;
  for (std::size_t i = 0; i < probs_.size(); ++i) out.emplace_back(static_cast<int>(i), probs_[i]);
  return out;
}

std::vector<std::pair<int, double>> ClassScores::ranked() const {
  auto out = entries();
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

int ClassScores::top_class() const {
  if (probs_.empty()) throw std::logic_error("ClassScores: empty");
  return static_cast<int>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

double ClassScores::top_prob() const { return probs_.at(static_cast<std::size_t>(top_class())); }

json to_json(const ClassScores& s, bool ranked) {
  json arr = json::array();
  for (const auto& [cls, p] : ranked ? s.ranked() : s.entries()) arr.push_back({{"class", cls}, {"prob", p}});
  return arr;
}

ClassScores scores_from_json(const json& j) {
  if (!j.is_array()) throw std::invalid_argument("class scores must be a JSON array");
  std::vector<double> probs(j.size(), -1.0);
  for (const auto& e : j) {
    const int cls = e.at("class").get<int>();
    if (cls < 0 || static_cast<std::size_t>(cls) >= probs.size() || probs[cls] >= 0.0) {
      throw std::invalid_argument("class scores: bad or repeated class " + std::to_string(cls));
    }
    probs[cls] = e.at("prob").get<double>();
  }
  return ClassScores(std::move(probs));
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (loss != "categorical_crossentropy") throw std::invalid_argument("unsupported loss '" + loss + "'");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (input_size < 16) throw std::invalid_argument("input_size too small");
  augmentation.validate();
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"loss", c.loss},
       {"optimizer", "adam"},
       {"learning_rate", c.learning_rate},
       {"initialization", "he_normal"},
       {"seed", c.seed},
       {"input_size", c.input_size},
       {"augment", c.augment},
       {"augmentation",
        {{"flip_prob", c.augmentation.flip_prob},
         {"blur_sigma_range", {c.augmentation.blur_sigma_range.first, c.augmentation.blur_sigma_range.second}},
         {"noise_stddev", c.augmentation.noise_stddev},
         {"zoom_range", {c.augmentation.zoom_range.first, c.augmentation.zoom_range.second}},
         {"rng_seed", c.augmentation.rng_seed}}}};
}

void from_json(const json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", 32);
  c.epochs = j.value("epochs", 100);
  c.loss = j.value("loss", std::string("categorical_crossentropy"));
  c.learning_rate = j.value("learning_rate", 1e-3);
  c.seed = j.value("seed", std::uint64_t{0});
  c.input_size = j.value("input_size", kInputSize);
  c.augment = j.value("augment", true);
  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    c.augmentation.flip_prob = a.value("flip_prob", 0.5);
    const auto blur = a.value("blur_sigma_range", std::vector<double>{0.0, 1.5});
    c.augmentation.blur_sigma_range = {blur.at(0), blur.at(1)};
    c.augmentation.noise_stddev = a.value("noise_stddev", 0.05);
    const auto zoom = a.value("zoom_range", std::vector<double>{0.9, 1.1});
    c.augmentation.zoom_range = {zoom.at(0), zoom.at(1)};
    c.augmentation.rng_seed = a.value("rng_seed", std::uint64_t{0});
  }
}

LabeledImages load_labeled_images(const DatasetManifest& manifest, int input_size,
                                  const FrameTransform& transform) {
  LabeledImages out;
  out.images.reserve(manifest.size());
  out.labels.reserve(manifest.size());
  for (const auto& r : manifest.records()) {
    cv::Mat frame = read_image(manifest.resolve(r));
    if (transform) frame = transform(frame, r);
    out.images.push_back(preprocess(frame, input_size));
    out.labels.push_back(r.class_id);
  }
  return out;
}

nn::Tensor make_batch(const std::vector<cv::Mat>& images, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: no images");
  const cv::Mat& first = images.at(indices[0]);
  nn::Tensor batch({static_cast<int>(indices.size()), first.rows, first.cols, 3});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const cv::Mat& img = images.at(indices[b]);
    if (img.type() != CV_32FC3 || img.rows != first.rows || img.cols != first.cols) {
      throw std::invalid_argument("make_batch: images must share a float 3-channel shape");
    }
    float* dst = batch.sample(static_cast<int>(b));
    for (int r = 0; r < img.rows; ++r) {
      const float* src = img.ptr<float>(r);
      std::copy(src, src + img.cols * 3, dst + static_cast<std::size_t>(r) * img.cols * 3);
    }
  }
  return batch;
}

std::pair<double, double> evaluate_classifier(ClassifierNetwork& net, const LabeledImages& data,
                                              int batch_size) {
  if (data.size() == 0) return {0.0, 0.0};
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const nn::Tensor logits = net.forward(make_batch(data.images, idx), nn::Mode::infer);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(data.labels[i]);
    loss += nn::softmax_cross_entropy(logits, labels, nullptr) * idx.size();
    const auto k = logits.shape().sample_size();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* row = logits.sample(static_cast<int>(b));
      if (std::max_element(row, row + k) - row == labels[b]) ++correct;
    }
  }
  return {loss / data.size(), double(correct) / data.size()};
}

TrainResult train_classifier(const LabeledImages& train, const LabeledImages& val, const TrainConfig& cfg,
                             const NetworkSpec& spec, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.size() == 0) throw std::invalid_argument("train_classifier: empty training set");
  const std::set<int> train_classes(train.labels.begin(), train.labels.end());
  for (int label : val.labels) {
    if (!train_classes.count(label)) {
      throw std::invalid_argument("train_classifier: class " + std::to_string(label) +
                                  " has validation records but no training records");
    }
  }
  for (int label : train.labels) {
    if (label < 0 || label >= spec.classes) throw std::invalid_argument("train_classifier: label out of range");
  }

  TrainResult result;
  result.network = std::make_unique<ClassifierNetwork>(spec, cfg.seed);
  ClassifierNetwork& net = *result.network;
  nn::Adam adam(net.parameters(), {static_cast<float>(cfg.learning_rate)});
  std::vector<nn::Tensor> best_state;
  double best_val = -1.0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0xE0C, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<cv::Mat> views;
      std::vector<int> labels;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        if (cfg.augment) {
          AugmentationConfig a = cfg.augmentation;
          a.rng_seed = mix_seed(cfg.augmentation.rng_seed ^ cfg.seed, static_cast<std::uint64_t>(epoch), i);
          views.push_back(augment(train.images[i], a));
        } else {
          views.push_back(train.images[i]);
        }
        labels.push_back(train.labels[i]);
      }
      std::vector<std::size_t> idx(views.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      adam.zero_grad();
      const nn::Tensor logits = net.forward(make_batch(views, idx), nn::Mode::train);
      nn::Tensor grad;
      const float loss = nn::softmax_cross_entropy(logits, labels, &grad);
      net.backward(grad);
      adam.step();
      loss_sum += double(loss) * labels.size();
      const auto k = logits.shape().sample_size();
      for (std::size_t b = 0; b < labels.size(); ++b) {
        const float* row = logits.sample(static_cast<int>(b));
        if (std::max_element(row, row + k) - row == labels[b]) ++correct;
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / train.size();
    m.train_acc = double(correct) / train.size();
    std::tie(m.val_loss, m.val_acc) = evaluate_classifier(net, val, cfg.batch_size);
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    // Without a validation set the latest epoch wins.
    const double score = val.size() > 0 ? m.val_acc : double(epoch);
    if (score > best_val) {
      best_val = score;
      result.best_epoch = epoch;
      best_state = nn::snapshot_state(net.body());
    }
  }
  nn::restore_state(net.body(), best_state);
  return result;
}

TrainResult train_classifier(const DatasetManifest& train, const DatasetManifest& val, const TrainConfig& cfg,
                             const NetworkSpec& spec, const EpochCallback& on_epoch) {
  if (train.empty()) throw std::invalid_argument("train_classifier: empty training manifest");
  return train_classifier(load_labeled_images(train, cfg.input_size), load_labeled_images(val, cfg.input_size),
                          cfg, spec, on_epoch);
}

ClassScores predict(ClassifierNetwork& net, const cv::Mat& preprocessed) {
  return predict_all(net, {preprocessed}).front();
}

std::vector<ClassScores> predict_all(ClassifierNetwork& net, const std::vector<cv::Mat>& images, int batch_size) {
  std::vector<ClassScores> out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(images.size(), start + batch_size); ++i) idx.push_back(i);
    const nn::Tensor logits = net.forward(make_batch(images, idx), nn::Mode::infer);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      out.push_back(ClassScores::from_logits({logits.sample(static_cast<int>(b)), logits.shape().sample_size()}));
    }
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

void write_metrics_csv(const fs::path& path, const std::vector<EpochMetrics>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& m : history) {
    out << m.epoch << ',' << format_number(m.train_loss) << ',' << format_number(m.train_acc) << ','
        << format_number(m.val_loss) << ',' << format_number(m.val_acc) << '\n';
  }
}

void save_classifier(const fs::path& dir, ClassifierNetwork& net, const TrainConfig& cfg,
                     const std::vector<EpochMetrics>& history, int best_epoch) {
  fs::create_directories(dir);
  nn::save_state(net.body(), dir / "weights.safetensors", {{"format", "vmmc-classifier"}});
  json config = {{"kind", "classifier"},
                 {"network", net.spec()},
                 {"train", cfg},
                 {"best_epoch", best_epoch},
                 {"trainable_parameters", net.trainable_parameter_count()}};
  std::ofstream(dir / "config.json") << config.dump(2) << '\n';
  write_metrics_csv(dir / "metrics.csv", history);
}

LoadedClassifier load_classifier(const fs::path& dir) {
  std::ifstream in(dir / "config.json");
  if (!in) throw std::runtime_error("no classifier config in " + dir.string());
  const json config = json::parse(in);
  if (config.value("kind", std::string()) != "classifier") {
    throw std::runtime_error(dir.string() + " is not a classifier checkpoint");
  }
  LoadedClassifier out;
  out.config = config.at("train").get<TrainConfig>();
  out.network = std::make_unique<ClassifierNetwork>(config.at("network").get<NetworkSpec>());
  nn::load_state(out.network->body(), dir / "weights.safetensors");
  return out;
}

}  // namespace vmmc
