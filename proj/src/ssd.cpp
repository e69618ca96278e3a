#include "vmmc/ssd.hpp"

#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "vmmc/nn/optim.hpp"
#include "vmmc/nn/state.hpp"

namespace vmmc {
namespace fs = std::filesystem;
using nlohmann::json;

std::vector<SsdStage> SsdConfig::lite_backbone() {
  return {
      {16, 3, 2, 1, 1, false},  {32, 3, 2, 1, 1, false},  {64, 3, 2, 1, 2, true},
      {96, 3, 2, 1, 1, true},   {128, 3, 2, 1, 1, true},  {128, 3, 2, 1, 1, true},
      {128, 3, 1, 0, 1, true},  {128, 3, 1, 0, 1, true},
  };
}

void SsdConfig::validate() const {
  if (classes < 1) throw std::invalid_argument("ssd: need at least one foreground class");
  anchors.validate();
  loss.validate();
  const auto sources = std::count_if(stages.begin(), stages.end(), [](const SsdStage& s) { return s.source; });
  if (static_cast<std::size_t>(sources) != anchors.layers.size()) {
    throw std::invalid_argument("ssd: " + std::to_string(sources) + " source maps for " +
                                std::to_string(anchors.layers.size()) + " anchor layers");
  }
  for (const auto& s : stages) {
    if (s.filters <= 0 || s.kernel <= 0 || s.stride <= 0 || s.padding < 0 || s.convs < 1) {
      throw std::invalid_argument("ssd: bad backbone stage");
    }
  }
}

void to_json(json& j, const SsdConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) {
    stages.push_back({{"filters", s.filters}, {"kernel", s.kernel}, {"stride", s.stride},
                      {"padding", s.padding}, {"convs", s.convs}, {"source", s.source}});
  }
  j = {{"classes", c.classes}, {"anchors", c.anchors}, {"stages", stages}, {"loss", c.loss}, {"decode", c.decode}};
}

void from_json(const json& j, SsdConfig& c) {
  c.classes = j.at("classes");
  c.anchors = j.at("anchors").get<AnchorPlan>();
  c.stages.clear();
  for (const auto& s : j.at("stages")) {
    c.stages.push_back({s.at("filters"), s.at("kernel"), s.at("stride"), s.at("padding"), s.at("convs"),
                        s.at("source")});
  }
  c.loss = j.value("loss", json::object()).get<DetectorLossConfig>();
  c.decode = j.value("decode", json::object()).get<DecodeConfig>();
}

SsdNetwork::SsdNetwork(SsdConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), modules_("ssd") {
  cfg_.validate();
  anchors_ = generate_anchors(cfg_.anchors);

  int channels = 3;
  nn::Shape shape{1, cfg_.anchors.image_size, cfg_.anchors.image_size, 3};
  for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
    const SsdStage& st = cfg_.stages[i];
    const std::string prefix = "backbone/stage" + std::to_string(i + 1);
    auto& seq = modules_.add<nn::Sequential>(prefix);
    for (int k = 0; k < st.convs; ++k) {
      nn::Conv2DOptions o;
      o.in_channels = channels;
      o.filters = st.filters;
      o.kernel = st.kernel;
      o.stride = k == 0 ? st.stride : 1;
      o.padding = k == 0 ? st.padding : st.kernel / 2;
      const std::string name = prefix + "/conv" + std::to_string(k + 1);
      seq.add<nn::Conv2D>(name, o);
      seq.add<nn::BatchNorm>(name + "/bn", st.filters);
      seq.add<nn::ReLU>(name + "/relu");
      channels = st.filters;
    }
    shape = seq.output_shape(shape);
    if (shape.h <= 0 || shape.w <= 0) throw std::invalid_argument("ssd: backbone collapses the input");
    stages_.push_back(&seq);
    if (st.source) {
      const std::size_t s = source_stage_.size();
      const AnchorLayer& layer = cfg_.anchors.layers[s];
      if (shape.h != layer.grid || shape.w != layer.grid) {
        throw std::invalid_argument("ssd: source " + std::to_string(s + 1) + " is " + std::to_string(shape.h) +
                                    "x" + std::to_string(shape.w) + " but the anchor grid is " +
                                    std::to_string(layer.grid));
      }
      source_stage_.push_back(i);
      source_shapes_.push_back(shape);
    }
  }
  for (std::size_t s = 0; s < source_stage_.size(); ++s) {
    const int boxes = cfg_.anchors.layers[s].boxes_per_cell();
    const int in = cfg_.stages[source_stage_[s]].filters;
    nn::Conv2DOptions conf{in, boxes * static_cast<int>(head_classes()), 3, 1, 1};
    nn::Conv2DOptions loc{in, boxes * 4, 3, 1, 1};
    conf_heads_.push_back(&modules_.add<nn::Conv2D>("head/conf" + std::to_string(s + 1), conf));
    loc_heads_.push_back(&modules_.add<nn::Conv2D>("head/loc" + std::to_string(s + 1), loc));
  }
  std::mt19937_64 rng(seed);
  modules_.initialize(rng);
}

void SsdNetwork::set_backbone_frozen(bool frozen) {
  frozen_ = frozen;
  for (nn::Parameter* p : backbone_parameters()) p->trainable = !frozen;
}

std::vector<nn::Parameter*> SsdNetwork::backbone_parameters() {
  std::vector<nn::Parameter*> out;
  for (nn::Sequential* s : stages_) s->collect_parameters(out);
  return out;
}

SsdNetwork::Output SsdNetwork::forward(const nn::Tensor& batch, nn::Mode mode) {
  const int size = cfg_.anchors.image_size;
  if (batch.shape().h != size || batch.shape().w != size || batch.shape().c != 3) {
    throw std::invalid_argument("ssd: expected (n, " + std::to_string(size) + ", " + std::to_string(size) +
                                ", 3) input, got " + nn::to_string(batch.shape()));
  }
  const int n = batch.shape().n;
  const int anchors = static_cast<int>(anchors_.size());
  const int classes = static_cast<int>(head_classes());
  Output out{nn::Tensor({n, anchors, 1, classes}), nn::Tensor({n, anchors, 1, 4})};

  const nn::Mode backbone_mode = frozen_ ? nn::Mode::infer : mode;
  nn::Tensor x = batch;
  std::size_t s = 0;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    x = stages_[i]->forward(x, backbone_mode);
    if (s < source_stage_.size() && source_stage_[s] == i) {
      const nn::Tensor conf = conf_heads_[s]->forward(x, mode);
      const nn::Tensor loc = loc_heads_[s]->forward(x, mode);
      const std::size_t first = anchors_.layer_offsets[s];
      for (int b = 0; b < n; ++b) {
        std::memcpy(out.conf.sample(b) + first * classes, conf.sample(b), conf.shape().sample_size() * sizeof(float));
        std::memcpy(out.loc.sample(b) + first * 4, loc.sample(b), loc.shape().sample_size() * sizeof(float));
      }
      ++s;
    }
  }
  return out;
}

void SsdNetwork::backward(const nn::Tensor& conf_grad, const nn::Tensor& loc_grad) {
  const int n = conf_grad.shape().n;
  const int classes = static_cast<int>(head_classes());
  std::vector<nn::Tensor> source_grads;
  for (std::size_t s = 0; s < source_stage_.size(); ++s) {
    const nn::Shape& fs = source_shapes_[s];
    const int boxes = cfg_.anchors.layers[s].boxes_per_cell();
    nn::Tensor gc({n, fs.h, fs.w, boxes * classes});
    nn::Tensor gl({n, fs.h, fs.w, boxes * 4});
    const std::size_t first = anchors_.layer_offsets[s];
    for (int b = 0; b < n; ++b) {
      std::memcpy(gc.sample(b), conf_grad.sample(b) + first * classes, gc.shape().sample_size() * sizeof(float));
      std::memcpy(gl.sample(b), loc_grad.sample(b) + first * 4, gl.shape().sample_size() * sizeof(float));
    }
    nn::Tensor g = conf_heads_[s]->backward(gc);
    g += loc_heads_[s]->backward(gl);
    source_grads.push_back(std::move(g));
  }
  if (frozen_) return;

  nn::Tensor g;
  std::size_t s = source_stage_.size();
  for (std::size_t i = stages_.size(); i-- > 0;) {
    if (s > 0 && source_stage_[s - 1] == i) {
      --s;
      if (g.empty()) {
        g = std::move(source_grads[s]);
      } else {
        g += source_grads[s];
      }
    }
    if (g.empty()) continue;
    g = stages_[i]->backward(g);
  }
}

std::vector<Detection> detect(SsdNetwork& net, const cv::Mat& preprocessed) {
  return detect(net, preprocessed, net.config().decode);
}

namespace {

nn::Tensor square_batch(const std::vector<cv::Mat>& images, std::size_t first, std::size_t count, int size,
                        const std::vector<bool>* flips = nullptr) {
  nn::Tensor batch({static_cast<int>(count), size, size, 3});
  for (std::size_t b = 0; b < count; ++b) {
    cv::Mat img = images.at(first + b);
    if (img.type() != CV_32FC3 || img.rows != size || img.cols != size) {
      throw std::invalid_argument("ssd: images must be preprocessed to " + std::to_string(size) + "x" +
                                  std::to_string(size) + "x3 float");
    }
    if (flips && (*flips)[b]) {
      cv::Mat mirrored;
      cv::flip(img, mirrored, 1);
      img = mirrored;
    }
    float* dst = batch.sample(static_cast<int>(b));
    for (int r = 0; r < size; ++r) {
      std::memcpy(dst + static_cast<std::size_t>(r) * size * 3, img.ptr<float>(r), sizeof(float) * size * 3);
    }
  }
  return batch;
}

std::vector<Detection> decode_sample(SsdNetwork& net, const SsdNetwork::Output& out, int b, const DecodeConfig& cfg) {
  const std::size_t a = net.anchors().size();
  const std::size_t k = net.head_classes();
  return decode_detections({out.conf.sample(b), a * k}, {out.loc.sample(b), a * 4}, k, net.anchors(), cfg);
}

}  // namespace

std::vector<Detection> detect(SsdNetwork& net, const cv::Mat& preprocessed, const DecodeConfig& cfg) {
  const int size = net.config().anchors.image_size;
  const auto heads = net.forward(square_batch({preprocessed}, 0, 1, size), nn::Mode::infer);
  return decode_sample(net, heads, 0, cfg);
}

std::vector<std::vector<Detection>> detect_all(SsdNetwork& net, const std::vector<cv::Mat>& images, int batch_size) {
  std::vector<std::vector<Detection>> out;
  const int size = net.config().anchors.image_size;
  for (std::size_t first = 0; first < images.size(); first += batch_size) {
    const std::size_t count = std::min<std::size_t>(batch_size, images.size() - first);
    const auto heads = net.forward(square_batch(images, first, count, size), nn::Mode::infer);
    for (std::size_t b = 0; b < count; ++b) out.push_back(decode_sample(net, heads, static_cast<int>(b), net.config().decode));
  }
  return out;
}

SsdLossValue ssd_loss(const SsdNetwork::Output& out, const std::vector<AnchorAssignment>& assignments,
                      const std::vector<std::vector<float>>& targets, const DetectorLossConfig& cfg,
                      SsdNetwork::Output* grad) {
  const int n = out.conf.shape().n;
  if (static_cast<int>(assignments.size()) != n || static_cast<int>(targets.size()) != n) {
    throw std::invalid_argument("ssd_loss: one assignment per image required");
  }
  const std::size_t anchors = static_cast<std::size_t>(out.conf.shape().h);
  const std::size_t classes = static_cast<std::size_t>(out.conf.shape().c);
  std::size_t positives = 0;
  for (const auto& a : assignments) positives += a.positives();
  if (positives == 0) throw std::invalid_argument("ssd_loss: no positive or negative anchors selected");
  if (grad) {
    grad->conf = nn::Tensor(out.conf.shape());
    grad->loc = nn::Tensor(out.loc.shape());
  }
  const float scale = 1.0f / static_cast<float>(positives);
  SsdLossValue v;
  v.positives = positives;
  for (int b = 0; b < n; ++b) {
    if (assignments[b].positives() == 0) continue;
    std::span<float> cg, lg;
    if (grad) {
      cg = {grad->conf.sample(b), anchors * classes};
      lg = {grad->loc.sample(b), anchors * 4};
    }
    const auto t = multibox_terms<float>({out.conf.sample(b), anchors * classes}, {out.loc.sample(b), anchors * 4},
                                         classes, assignments[b], targets[b], cfg, cg, lg, scale);
    v.classification += t.classification;
    v.localization += t.localization;
  }
  v.classification /= double(positives);
  v.localization /= double(positives);
  v.total = v.classification + cfg.loc_weight * v.localization;
  return v;
}

std::vector<DetectorSample> load_detector_samples(const DatasetManifest& manifest, int image_size,
                                                  const std::function<int(const ImageRecord&)>& label_of) {
  std::vector<DetectorSample> out;
  out.reserve(manifest.size());
  for (const auto& r : manifest.records()) {
    if (!r.bbox) throw std::invalid_argument("detector training record without a bounding box: " + r.image_path);
    const cv::Mat frame = read_image(manifest.resolve(r));
    DetectorSample s;
    s.image = preprocess(frame, image_size);
    s.gt.push_back({to_square_normalized(*r.bbox, frame.cols, frame.rows), label_of(r)});
    out.push_back(std::move(s));
  }
  return out;
}

void DetectorTrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw std::invalid_argument("flip_prob must be in [0,1]");
}

void to_json(json& j, const DetectorTrainConfig& c) {
  j = {{"batch_size", c.batch_size},         {"epochs", c.epochs}, {"learning_rate", c.learning_rate},
       {"seed", c.seed},                     {"freeze_backbone", c.freeze_backbone},
       {"flip_prob", c.flip_prob},           {"loss", "smooth_l1+softmax"}, {"optimizer", "adam"}};
}

void from_json(const json& j, DetectorTrainConfig& c) {
  c.batch_size = j.value("batch_size", 32);
  c.epochs = j.value("epochs", 30);
  c.learning_rate = j.value("learning_rate", 1e-3);
  c.seed = j.value("seed", std::uint64_t{0});
  c.freeze_backbone = j.value("freeze_backbone", false);
  c.flip_prob = j.value("flip_prob", 0.5);
}

std::vector<DetectorEpoch> fine_tune(SsdNetwork& net, const std::vector<DetectorSample>& train,
                                     const DetectorTrainConfig& cfg,
                                     const std::function<void(const DetectorEpoch&)>& on_epoch) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("fine_tune: empty training set");
  for (const auto& s : train) {
    if (s.gt.empty()) throw std::invalid_argument("fine_tune: training sample without a bounding box");
    for (const auto& g : s.gt) {
      if (g.class_id < 0 || g.class_id >= net.config().classes) {
        throw std::invalid_argument("fine_tune: class " + std::to_string(g.class_id) + " outside the detector");
      }
    }
  }
  net.set_backbone_frozen(cfg.freeze_backbone);
  nn::Adam adam(net.parameters(), {static_cast<float>(cfg.learning_rate)});
  const int size = net.config().anchors.image_size;
  const DetectorLossConfig& loss_cfg = net.config().loss;

  std::vector<cv::Mat> images;
  for (const auto& s : train) images.push_back(s.image);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<DetectorEpoch> history;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0xD37, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    std::bernoulli_distribution flip(cfg.flip_prob);
    DetectorEpoch m;
    m.epoch = epoch;
    double weight = 0.0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - first);
      std::vector<cv::Mat> batch_images;
      std::vector<bool> flips;
      std::vector<AnchorAssignment> assignments;
      std::vector<std::vector<float>> targets;
      for (std::size_t k = 0; k < count; ++k) {
        const DetectorSample& s = train[order[first + k]];
        const bool f = flip(rng);
        std::vector<GroundTruth> gt = s.gt;
        if (f) {
          for (auto& g : gt) g.box = {1.0 - g.box.x_max, g.box.y_min, 1.0 - g.box.x_min, g.box.y_max, true};
        }
        batch_images.push_back(s.image);
        flips.push_back(f);
        assignments.push_back(match_anchors(net.anchors(), gt, loss_cfg.match_threshold));
        targets.push_back(loc_targets(net.anchors(), assignments.back(), gt, loss_cfg.encoding));
      }
      adam.zero_grad();
      const auto out = net.forward(square_batch(batch_images, 0, count, size, &flips), nn::Mode::train);
      SsdNetwork::Output grad;
      const auto v = ssd_loss(out, assignments, targets, loss_cfg, &grad);
      net.backward(grad.conf, grad.loc);
      adam.step();
      m.loss += v.total * count;
      m.classification += v.classification * count;
      m.localization += v.localization * count;
      weight += count;
    }
    m.loss /= weight;
    m.classification /= weight;
    m.localization /= weight;
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

void save_detector(const fs::path& dir, SsdNetwork& net, const DetectorTrainConfig& train,
                   const std::vector<DetectorEpoch>& history) {
  fs::create_directories(dir);
  nn::save_state(net.modules(), dir / "weights.safetensors", {{"format", "vmmc-ssd"}});
  const json config = {{"kind", "detector"}, {"ssd", net.config()}, {"train", train}};
  std::ofstream(dir / "config.json") << config.dump(2) << '\n';
  std::ofstream metrics(dir / "metrics.csv", std::ios::trunc);
  metrics << "epoch,loss,classification,localization\n";
  for (const auto& m : history) {
    metrics << m.epoch << ',' << format_number(m.loss) << ',' << format_number(m.classification) << ','
            << format_number(m.localization) << '\n';
  }
}

std::unique_ptr<SsdNetwork> load_detector(const fs::path& dir) {
  std::ifstream in(dir / "config.json");
  if (!in) throw std::runtime_error("no detector config in " + dir.string());
  const json config = json::parse(in);
  if (config.value("kind", std::string()) != "detector") {
    throw std::runtime_error(dir.string() + " is not a detector checkpoint");
  }
  auto net = std::make_unique<SsdNetwork>(config.at("ssd").get<SsdConfig>());
  nn::load_state(net->modules(), dir / "weights.safetensors");
  return net;
}

CarDetector make_car_detector(SsdNetwork& net, int car_class, double min_confidence) {
  if (car_class < 0 || car_class >= net.config().classes) throw std::invalid_argument("car class outside the detector");
  DecodeConfig cfg = net.config().decode;
  cfg.report_floor = min_confidence;
  return [&net, car_class, cfg](const cv::Mat& frame) {
    const cv::Mat square = preprocess(frame, net.config().anchors.image_size);
    std::vector<DetectionCandidate> out;
    for (const Detection& d : detect(net, square, cfg)) {
      if (d.class_id != car_class) continue;
      const BoundingBox px = to_frame_pixels(d.bbox, frame.cols, frame.rows);
      if (px.valid()) out.push_back({px, d.prob, "car"});
    }
    return out;
  };
}

std::vector<WeightMapping> parse_weight_map(const json& j) {
  std::vector<WeightMapping> out;
  for (const auto& e : j.at("tensors")) {
    WeightMapping m{e.at("source"), e.at("target")};
    const std::string layout = e.value("layout", std::string("as_is"));
    if (layout == "as_is") {
      m.layout = KernelLayout::as_is;
    } else if (layout == "oihw") {
      m.layout = KernelLayout::oihw;
    } else if (layout == "dense_out_in") {
      m.layout = KernelLayout::dense_out_in;
    } else {
      throw std::invalid_argument("unknown kernel layout '" + layout + "'");
    }
    out.push_back(std::move(m));
  }
  return out;
}

nn::TensorArchive convert_weights(const nn::TensorArchive& source, const std::vector<WeightMapping>& mapping) {
  nn::TensorArchive out;
  out.metadata = {{"format", "vmmc-ssd"}, {"converted", "true"}};
  for (const auto& m : mapping) {
    const auto it = source.tensors.find(m.source);
    if (it == source.tensors.end()) throw std::runtime_error("source checkpoint has no tensor " + m.source);
    const nn::StoredTensor& t = it->second;
    nn::StoredTensor r;
    switch (m.layout) {
      case KernelLayout::as_is:
        r = t;
        break;
      case KernelLayout::oihw: {
        if (t.shape.size() != 4) throw std::runtime_error(m.source + ": oihw kernel must be 4-d");
        const auto o = t.shape[0], i = t.shape[1], h = t.shape[2], w = t.shape[3];
        r.shape = {h, w, i, o};
        r.data.resize(t.data.size());
        for (std::int64_t a = 0; a < o; ++a)
          for (std::int64_t b = 0; b < i; ++b)
            for (std::int64_t y = 0; y < h; ++y)
              for (std::int64_t x = 0; x < w; ++x)
                r.data[((y * w + x) * i + b) * o + a] = t.data[((a * i + b) * h + y) * w + x];
        break;
      }
      case KernelLayout::dense_out_in: {
        if (t.shape.size() != 2) throw std::runtime_error(m.source + ": dense kernel must be 2-d");
        const auto o = t.shape[0], i = t.shape[1];
        r.shape = {1, 1, i, o};
        r.data.resize(t.data.size());
        for (std::int64_t a = 0; a < o; ++a)
          for (std::int64_t b = 0; b < i; ++b) r.data[b * o + a] = t.data[a * i + b];
        break;
      }
    }
    out.tensors[m.target] = std::move(r);
  }
  return out;
}

}  // namespace vmmc
