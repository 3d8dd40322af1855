#include "mlcl/fewshot.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <utility>

#include "mlcl/errors.hpp"
#include "mlcl/hash.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

namespace {

constexpr std::uint64_t kRelationInitStream = 0x52454c4e;

void check_positive(std::size_t v, const char* field) {
    if (v == 0) {
        throw ConfigError(std::string("relation net field '") + field + "' must be positive");
    }
}

std::size_t pooled_dim(std::size_t hw) { return (hw - 2) / 2 + 1; }

/// Per-class element-wise mean of the support features [C*N, ch, h, w].
std::vector<Tensor> class_prototypes(const Tensor& feats, const std::vector<int>& labels,
                                     std::size_t way) {
    if (feats.ndim() != 4 || feats.dim(0) != labels.size()) {
        throw ShapeError("support features " + feats.shape_str() + " do not match " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t per = feats.numel() / feats.dim(0);
    std::vector<Tensor> protos(way, Tensor({feats.dim(1), feats.dim(2), feats.dim(3)}));
    std::vector<std::size_t> counts(way, 0);
    for (std::size_t m = 0; m < feats.dim(0); ++m) {
        const int c = labels[m];
        if (c < 0 || static_cast<std::size_t>(c) >= way) {
            throw ShapeError("support label " + std::to_string(c) + " outside 0.." +
                             std::to_string(way - 1));
        }
        double* acc = protos[static_cast<std::size_t>(c)].data();
        const double* src = feats.data() + m * per;
        for (std::size_t i = 0; i < per; ++i) acc[i] += src[i];
        ++counts[static_cast<std::size_t>(c)];
    }
    for (std::size_t c = 0; c < way; ++c) {
        if (counts[c] == 0) {
            throw ShapeError("class " + std::to_string(c) + " has no support items");
        }
        protos[c].scale_(1.0 / static_cast<double>(counts[c]));
    }
    return protos;
}

/// Pair batch row layout: row = q * way + k, channels query-first.
Tensor build_pair_batch(const Tensor& query_feats, const std::vector<Tensor>& protos) {
    const std::size_t nq = query_feats.dim(0);
    const std::size_t way = protos.size();
    const std::size_t ch = query_feats.dim(1);
    const std::size_t h = query_feats.dim(2);
    const std::size_t w = query_feats.dim(3);
    const std::size_t per = ch * h * w;
    Tensor pairs({nq * way, 2 * ch, h, w});
    for (std::size_t q = 0; q < nq; ++q) {
        const double* qsrc = query_feats.data() + q * per;
        for (std::size_t k = 0; k < way; ++k) {
            double* dst = pairs.data() + (q * way + k) * 2 * per;
            std::memcpy(dst, qsrc, per * sizeof(double));
            std::memcpy(dst + per, protos[k].data(), per * sizeof(double));
        }
    }
    return pairs;
}

void fill_scores(ScoreMatrix& out, std::size_t member, const Tensor& scores, std::size_t way,
                 std::size_t nq) {
    for (std::size_t q = 0; q < nq; ++q) {
        for (std::size_t k = 0; k < way; ++k) {
            out.at(member, k, q) = scores[q * way + k];
        }
    }
}

} // namespace

void RelationNetConfig::validate() const {
    check_positive(in_channels, "in_channels");
    check_positive(input_hw, "input_hw");
    check_positive(conv_channels, "conv_channels");
    check_positive(hidden_dim, "hidden_dim");
}

void to_json(nlohmann::json& j, const RelationNetConfig& c) {
    j = nlohmann::json{{"in_channels", c.in_channels},
                       {"input_hw", c.input_hw},
                       {"conv_channels", c.conv_channels},
                       {"hidden_dim", c.hidden_dim}};
}

void from_json(const nlohmann::json& j, RelationNetConfig& c) {
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.input_hw = j.at("input_hw").get<std::size_t>();
    c.conv_channels = j.value("conv_channels", std::size_t{64});
    c.hidden_dim = j.value("hidden_dim", std::size_t{8});
}

RelationNet::RelationNet(RelationNetConfig config) : config_(std::move(config)) {
    config_.validate();
    std::size_t hw = config_.input_hw;
    conv1_ = nn::Conv2d(2 * config_.in_channels, config_.conv_channels, 3, 1, 1);
    bn1_ = nn::BatchNorm2d(config_.conv_channels);
    use_pool1_ = hw >= 2;
    if (use_pool1_) {
        pool1_ = nn::MaxPool2d(2, 2);
        hw = pooled_dim(hw);
    }
    conv2_ = nn::Conv2d(config_.conv_channels, config_.conv_channels, 3, 1, 1);
    bn2_ = nn::BatchNorm2d(config_.conv_channels);
    use_pool2_ = hw >= 2;
    if (use_pool2_) {
        pool2_ = nn::MaxPool2d(2, 2);
        hw = pooled_dim(hw);
    }
    flat_dim_ = config_.conv_channels * hw * hw;
    fc1_ = nn::Linear(flat_dim_, config_.hidden_dim);
    fc2_ = nn::Linear(config_.hidden_dim, 1);
}

void RelationNet::init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    fc1_.init(rng);
    fc2_.init(rng);
}

void RelationNet::set_training(bool training) {
    bn1_.set_training(training);
    bn2_.set_training(training);
}

Tensor RelationNet::forward(const Tensor& x, bool retain) {
    if (x.ndim() != 4 || x.dim(1) != 2 * config_.in_channels || x.dim(2) != config_.input_hw ||
        x.dim(3) != config_.input_hw) {
        throw ShapeError("relation net expects [N, " + std::to_string(2 * config_.in_channels) +
                         ", " + std::to_string(config_.input_hw) + ", " +
                         std::to_string(config_.input_hw) + "], got " + x.shape_str());
    }
    Tensor h = conv1_.forward(x, retain);
    h = bn1_.forward(h, retain);
    h = relu1_.forward(h, retain);
    if (use_pool1_) h = pool1_.forward(h, retain);
    h = conv2_.forward(h, retain);
    h = bn2_.forward(h, retain);
    h = relu2_.forward(h, retain);
    if (use_pool2_) h = pool2_.forward(h, retain);
    if (retain) pre_flat_shape_ = h.shape();
    h.reshape({x.dim(0), flat_dim_});
    h = fc1_.forward(h, retain);
    h = relu3_.forward(h, retain);
    h = fc2_.forward(h, retain);
    return sigmoid_.forward(h, retain);
}

Tensor RelationNet::backward(const Tensor& dy) {
    Tensor d = sigmoid_.backward(dy);
    d = fc2_.backward(d);
    d = relu3_.backward(d);
    d = fc1_.backward(d);
    d.reshape(pre_flat_shape_);
    if (use_pool2_) d = pool2_.backward(d);
    d = relu2_.backward(d);
    d = bn2_.backward(d);
    d = conv2_.backward(d);
    if (use_pool1_) d = pool1_.backward(d);
    d = relu1_.backward(d);
    d = bn1_.backward(d);
    return conv1_.backward(d);
}

void RelationNet::collect(const std::string& prefix, nn::ParamList& out) {
    conv1_.collect(prefix + ".conv1", out);
    bn1_.collect(prefix + ".bn1", out);
    conv2_.collect(prefix + ".conv2", out);
    bn2_.collect(prefix + ".bn2", out);
    fc1_.collect(prefix + ".fc1", out);
    fc2_.collect(prefix + ".fc2", out);
}

nn::ParamList RelationNet::parameters() {
    nn::ParamList out;
    collect("relnet", out);
    return out;
}

void RelationNet::save(const std::filesystem::path& path, const nlohmann::json& extra_meta) {
    TensorFile file;
    nn::ParamList params = parameters();
    for (const auto& p : params) file.put("param." + p.name, *p.value);
    std::vector<std::pair<std::string, Tensor*>> state;
    bn1_.collect_state("relnet.bn1", state);
    bn2_.collect_state("relnet.bn2", state);
    for (const auto& [name, t] : state) file.put("state." + name, *t);
    file.meta()["kind"] = "relation_net";
    file.meta()["format_version"] = 1;
    file.meta()["config"] = config_;
    if (extra_meta.is_object()) {
        for (const auto& [key, value] : extra_meta.items()) file.meta()[key] = value;
    }
    file.save(path);
}

RelationNet RelationNet::load(const std::filesystem::path& path, nlohmann::json* meta_out) {
    TensorFile file = TensorFile::load(path);
    if (file.meta().value("kind", std::string{}) != "relation_net") {
        throw IoError("checkpoint " + path.string() + " does not hold a relation net");
    }
    RelationNetConfig cfg = file.meta().at("config").get<RelationNetConfig>();
    RelationNet net(cfg);
    nn::ParamList params = net.parameters();
    for (auto& p : params) {
        const Tensor& stored = file.get("param." + p.name);
        if (!stored.same_shape(*p.value)) {
            throw IoError("checkpoint tensor param." + p.name + " has shape " +
                          stored.shape_str() + ", expected " + p.value->shape_str());
        }
        *p.value = stored;
    }
    std::vector<std::pair<std::string, Tensor*>> state;
    net.bn1_.collect_state("relnet.bn1", state);
    net.bn2_.collect_state("relnet.bn2", state);
    for (auto& [name, t] : state) {
        const Tensor& stored = file.get("state." + name);
        if (!stored.same_shape(*t)) {
            throw IoError("checkpoint tensor state." + name + " has shape " + stored.shape_str() +
                          ", expected " + t->shape_str());
        }
        *t = stored;
    }
    if (meta_out != nullptr) *meta_out = file.meta();
    return net;
}

Tensor prototype(const std::vector<Tensor>& features) {
    if (features.empty()) throw ShapeError("prototype needs at least one feature");
    Tensor out = features.front();
    for (std::size_t i = 1; i < features.size(); ++i) {
        if (!features[i].same_shape(out)) {
            throw ShapeError("prototype features disagree in shape: " + out.shape_str() +
                             " vs " + features[i].shape_str());
        }
        out.add_(features[i]);
    }
    out.scale_(1.0 / static_cast<double>(features.size()));
    return out;
}

double relation_score(RelationNet& net, const Tensor& query_feature,
                      const Tensor& prototype_feature) {
    if (query_feature.ndim() != 3 || !query_feature.same_shape(prototype_feature)) {
        throw ShapeError("relation_score expects matching [C, H, W] features, got " +
                         query_feature.shape_str() + " and " + prototype_feature.shape_str());
    }
    Tensor x({1, 2 * query_feature.dim(0), query_feature.dim(1), query_feature.dim(2)});
    std::memcpy(x.data(), query_feature.data(), query_feature.numel() * sizeof(double));
    std::memcpy(x.data() + query_feature.numel(), prototype_feature.data(),
                prototype_feature.numel() * sizeof(double));
    return net.forward(x, false)[0];
}

std::vector<int> argmax_mean_scores(const ScoreMatrix& scores) {
    if (scores.members == 0 || scores.way == 0) {
        throw ShapeError("score matrix needs at least one member and one class");
    }
    std::vector<int> labels(scores.queries, 0);
    for (std::size_t q = 0; q < scores.queries; ++q) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_k = 0;
        for (std::size_t k = 0; k < scores.way; ++k) {
            double mean = 0.0;
            for (std::size_t t = 0; t < scores.members; ++t) mean += scores.at(t, k, q);
            mean /= static_cast<double>(scores.members);
            if (mean > best) {
                best = mean;
                best_k = k;
            }
        }
        labels[q] = static_cast<int>(best_k);
    }
    return labels;
}

EnsemblePrediction ensemble_classify(const std::vector<EnsembleMember>& members,
                                     const Episode& episode) {
    if (members.empty()) throw ConfigError("ensemble needs at least one member");
    for (const auto& m : members) {
        if (m.encoder == nullptr || m.net == nullptr) {
            throw ConfigError("ensemble member is missing its encoder or relation net");
        }
    }
    const std::size_t way = episode.way;
    const std::size_t nq = episode.query_labels.size();

    std::map<Encoder*, std::vector<std::size_t>> taps_by_encoder;
    for (const auto& m : members) taps_by_encoder[m.encoder].push_back(m.tap);
    std::map<Encoder*, TapMap> support_feats, query_feats;
    for (auto& [enc, tap_list] : taps_by_encoder) {
        std::sort(tap_list.begin(), tap_list.end());
        tap_list.erase(std::unique(tap_list.begin(), tap_list.end()), tap_list.end());
        TapSpec spec{tap_list};
        spec.validate(enc->tap_count());
        enc->set_training(false);
        support_feats[enc] = enc->forward_with_taps(episode.support, spec, false);
        query_feats[enc] = enc->forward_with_taps(episode.query, spec, false);
    }

    EnsemblePrediction pred;
    pred.scores = ScoreMatrix(members.size(), way, nq);
    for (std::size_t t = 0; t < members.size(); ++t) {
        const EnsembleMember& m = members[t];
        const Tensor& sup = support_feats.at(m.encoder).at(m.tap);
        const Tensor& qry = query_feats.at(m.encoder).at(m.tap);
        std::vector<Tensor> protos = class_prototypes(sup, episode.support_labels, way);
        Tensor pairs = build_pair_batch(qry, protos);
        m.net->set_training(false);
        Tensor scores = m.net->forward(pairs, false);
        fill_scores(pred.scores, t, scores, way, nq);
    }
    pred.labels = argmax_mean_scores(pred.scores);
    return pred;
}

void to_json(nlohmann::json& j, const RelationTrainConfig& c) {
    j = nlohmann::json{{"episodes", c.episodes}, {"way", c.way},
                       {"shot", c.shot},         {"queries", c.queries},
                       {"lr", c.lr},             {"momentum", c.momentum},
                       {"nesterov", c.nesterov}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RelationTrainConfig& c) {
    RelationTrainConfig defaults;
    c.episodes = j.value("episodes", defaults.episodes);
    c.way = j.value("way", defaults.way);
    c.shot = j.value("shot", defaults.shot);
    c.queries = j.value("queries", defaults.queries);
    c.lr = j.value("lr", defaults.lr);
    c.momentum = j.value("momentum", defaults.momentum);
    c.nesterov = j.value("nesterov", defaults.nesterov);
    c.seed = j.value("seed", defaults.seed);
}

RelationNet train_relation_net(Encoder& encoder, std::size_t tap, const SplitDataset& dataset,
                               Split split, const RelationTrainConfig& config,
                               const RelationNetConfig& net_config, const Normalization& norm,
                               const std::function<void(std::size_t, double)>& on_episode) {
    net_config.validate();
    if (config.way == 0 || config.shot == 0 || config.queries == 0) {
        throw ConfigError("relation training needs positive way, shot and queries");
    }
    if (config.lr <= 0.0) throw ConfigError("relation training lr must be positive");
    TapSpec spec{{tap}};
    spec.validate(encoder.tap_count());
    const std::vector<TapShape> shapes = list_taps(encoder.config());
    const TapShape& ts = shapes[tap - 1];
    if (ts.channels != net_config.in_channels || ts.height != net_config.input_hw) {
        throw ConfigError("tap " + std::to_string(tap) + " produces [" +
                          std::to_string(ts.channels) + ", " + std::to_string(ts.height) + ", " +
                          std::to_string(ts.width) + "] but the relation net expects [" +
                          std::to_string(net_config.in_channels) + ", " +
                          std::to_string(net_config.input_hw) + ", " +
                          std::to_string(net_config.input_hw) + "]");
    }

    encoder.set_training(false);
    const std::uint64_t fp_before = encoder.fingerprint();

    RelationNet net(net_config);
    Rng init_rng(derive_seed(config.seed, kRelationInitStream));
    net.init(init_rng);
    nn::Sgd opt(nn::SgdConfig{config.momentum, config.nesterov, 0.0});
    nn::ParamList params = net.parameters();

    for (std::size_t e = 0; e < config.episodes; ++e) {
        net.set_training(true);
        Rng ep_rng(derive_seed(config.seed, e));
        Episode ep =
            sample_episode(dataset, split, config.way, config.shot, config.queries, ep_rng, norm);
        TapMap sup = encoder.forward_with_taps(ep.support, spec, false);
        TapMap qry = encoder.forward_with_taps(ep.query, spec, false);
        std::vector<Tensor> protos = class_prototypes(sup.at(tap), ep.support_labels, config.way);
        const Tensor& query_feats = qry.at(tap);
        Tensor pairs = build_pair_batch(query_feats, protos);
        Tensor target({query_feats.dim(0) * config.way, 1});
        for (std::size_t q = 0; q < query_feats.dim(0); ++q) {
            for (std::size_t k = 0; k < config.way; ++k) {
                target[q * config.way + k] =
                    (static_cast<std::size_t>(ep.query_labels[q]) == k) ? 1.0 : 0.0;
            }
        }
        Tensor scores = net.forward(pairs, true);
        nn::LossAndGrad loss = nn::mse_loss(scores, target);
        nn::zero_grads(params);
        net.backward(loss.grad);
        opt.step(params, config.lr);
        if (on_episode) on_episode(e, loss.value);
    }

    if (encoder.fingerprint() != fp_before) {
        throw Error("encoder parameters changed while training a relation net");
    }
    return net;
}

FeatureTable::FeatureTable(Encoder& encoder, const TapSpec& taps, const SplitDataset& dataset,
                           Split split, const Normalization& norm, std::size_t batch) {
    taps.validate(encoder.tap_count());
    if (batch == 0) throw ConfigError("feature table batch size must be positive");
    encoder.set_training(false);
    const std::size_t side = encoder.config().input_size;
    const auto& classes = dataset.split(split);
    for (std::size_t t : taps.taps) {
        features_[t].assign(classes.size(), {});
    }
    for (std::size_t ci = 0; ci < classes.size(); ++ci) {
        const auto& images = classes[ci].images;
        for (std::size_t t : taps.taps) features_[t][ci].resize(images.size());
        for (std::size_t start = 0; start < images.size(); start += batch) {
            const std::size_t n = std::min(batch, images.size() - start);
            Tensor x({n, 3, side, side});
            for (std::size_t i = 0; i < n; ++i) {
                batch_assign(x, i, norm.apply(image_to_tensor(images[start + i])));
            }
            TapMap feats = encoder.forward_with_taps(x, taps, false);
            for (std::size_t t : taps.taps) {
                const Tensor& f = feats.at(t);
                for (std::size_t i = 0; i < n; ++i) {
                    features_[t][ci][start + i] = batch_slice(f, i);
                }
            }
        }
    }
}

const Tensor& FeatureTable::get(std::size_t tap, std::size_t class_idx,
                                std::size_t image_idx) const {
    auto it = features_.find(tap);
    if (it == features_.end()) {
        throw ConfigError("feature table holds no tap " + std::to_string(tap));
    }
    if (class_idx >= it->second.size() || image_idx >= it->second[class_idx].size()) {
        throw ShapeError("feature table has no image (" + std::to_string(class_idx) + ", " +
                         std::to_string(image_idx) + ") at tap " + std::to_string(tap));
    }
    return it->second[class_idx][image_idx];
}

std::vector<int> RelationEnsembleClassifier::classify(const Episode& episode) {
    if (members_.empty()) throw ConfigError("ensemble needs at least one member");
    const std::size_t way = episode.way;
    const std::size_t nq = episode.query_refs.size();
    last_scores_ = ScoreMatrix(members_.size(), way, nq);

    for (std::size_t t = 0; t < members_.size(); ++t) {
        const Member& m = members_[t];
        if (m.net == nullptr) throw ConfigError("ensemble member is missing its relation net");

        const Tensor& probe =
            table_.get(m.tap, episode.support_refs[0].first, episode.support_refs[0].second);
        const std::size_t per = probe.numel();
        std::vector<Tensor> protos(way, Tensor(probe.shape()));
        std::vector<std::size_t> counts(way, 0);
        for (std::size_t s = 0; s < episode.support_refs.size(); ++s) {
            const auto& [ci, ii] = episode.support_refs[s];
            const std::size_t c = static_cast<std::size_t>(episode.support_labels[s]);
            protos[c].add_(table_.get(m.tap, ci, ii));
            ++counts[c];
        }
        for (std::size_t c = 0; c < way; ++c) {
            if (counts[c] == 0) {
                throw ShapeError("class " + std::to_string(c) + " has no support items");
            }
            protos[c].scale_(1.0 / static_cast<double>(counts[c]));
        }

        Tensor pairs({nq * way, 2 * probe.dim(0), probe.dim(1), probe.dim(2)});
        for (std::size_t q = 0; q < nq; ++q) {
            const auto& [ci, ii] = episode.query_refs[q];
            const Tensor& qf = table_.get(m.tap, ci, ii);
            for (std::size_t k = 0; k < way; ++k) {
                double* dst = pairs.data() + (q * way + k) * 2 * per;
                std::memcpy(dst, qf.data(), per * sizeof(double));
                std::memcpy(dst + per, protos[k].data(), per * sizeof(double));
            }
        }
        m.net->set_training(false);
        Tensor scores = m.net->forward(pairs, false);
        fill_scores(last_scores_, t, scores, way, nq);
    }
    return argmax_mean_scores(last_scores_);
}

} // namespace mlcl
