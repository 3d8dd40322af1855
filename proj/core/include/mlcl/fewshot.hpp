#ifndef MLCL_FEWSHOT_HPP
#define MLCL_FEWSHOT_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlcl/encoders.hpp"
#include "mlcl/episodes.hpp"
#include "mlcl/nn.hpp"

namespace mlcl {

struct RelationNetConfig {
    std::size_t in_channels = 0;    // channels of one representation (pre-concat)
    std::size_t input_hw = 0;       // spatial size of the tapped feature map
    std::size_t conv_channels = 64;
    std::size_t hidden_dim = 8;

    void validate() const;
};

void to_json(nlohmann::json& j, const RelationNetConfig& c);
void from_json(const nlohmann::json& j, RelationNetConfig& c);

/// Similarity scorer over channel-concatenated (query, prototype) pairs:
/// two conv-bn-relu blocks (each followed by a 2x2 pool while the map is
/// large enough), then fc -> relu -> fc -> sigmoid.
class RelationNet {
public:
    RelationNet() = default;
    explicit RelationNet(RelationNetConfig config);

    void init(Rng& rng);
    void set_training(bool training);

    /// x: [N, 2*in_channels, H, W] -> scores [N, 1] in (0, 1).
    Tensor forward(const Tensor& x, bool retain);
    Tensor backward(const Tensor& dy);

    void collect(const std::string& prefix, nn::ParamList& out);
    nn::ParamList parameters();
    const RelationNetConfig& config() const { return config_; }

    void save(const std::filesystem::path& path, const nlohmann::json& extra_meta = {});
    static RelationNet load(const std::filesystem::path& path,
                            nlohmann::json* meta_out = nullptr);

private:
    RelationNetConfig config_;
    nn::Conv2d conv1_, conv2_;
    nn::BatchNorm2d bn1_, bn2_;
    nn::ReLU relu1_, relu2_, relu3_;
    nn::MaxPool2d pool1_, pool2_;
    bool use_pool1_ = false, use_pool2_ = false;
    std::size_t flat_dim_ = 0;
    nn::Linear fc1_, fc2_;
    nn::Sigmoid sigmoid_;
    std::vector<std::size_t> pre_flat_shape_;
};

/// Element-wise mean of same-shaped feature maps.
Tensor prototype(const std::vector<Tensor>& features);

/// g(query ‖ prototype), concatenation query-first. Inputs are [C, H, W].
double relation_score(RelationNet& net, const Tensor& query_feature,
                      const Tensor& prototype_feature);

/// member t x class k x query q scores in (0, 1).
struct ScoreMatrix {
    std::size_t members = 0, way = 0, queries = 0;
    std::vector<double> scores;

    ScoreMatrix() = default;
    ScoreMatrix(std::size_t t, std::size_t c, std::size_t q)
        : members(t), way(c), queries(q), scores(t * c * q, 0.0) {}

    double& at(std::size_t t, std::size_t k, std::size_t q) {
        return scores[(t * way + k) * queries + q];
    }
    double at(std::size_t t, std::size_t k, std::size_t q) const {
        return scores[(t * way + k) * queries + q];
    }
};

/// argmax over the member-mean scores, ties toward the lowest class index.
/// Returns one label per query (query-major: q = c * Q + j order preserved).
std::vector<int> argmax_mean_scores(const ScoreMatrix& scores);

/// One ensemble member: a frozen encoder, a tap, and that tap's relation net.
struct EnsembleMember {
    Encoder* encoder = nullptr;
    std::size_t tap = 0;
    RelationNet* net = nullptr;
};

struct EnsemblePrediction {
    std::vector<int> labels;
    ScoreMatrix scores;
};

/// Scores every (member, class, query) triple and predicts per Eq.-style
/// mean-score argmax. All members see the same episode.
EnsemblePrediction ensemble_classify(const std::vector<EnsembleMember>& members,
                                     const Episode& episode);

struct RelationTrainConfig {
    std::size_t episodes = 300;
    std::size_t way = 5;
    std::size_t shot = 1;
    std::size_t queries = 10;
    double lr = 1e-2;
    double momentum = 0.9;
    bool nesterov = true;
    std::uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const RelationTrainConfig& c);
void from_json(const nlohmann::json& j, RelationTrainConfig& c);

/// Trains a relation net for one tap against a frozen encoder, episodically
/// on the given split, with MSE against the one-hot match indicator. The
/// encoder fingerprint is asserted unchanged.
RelationNet train_relation_net(Encoder& encoder, std::size_t tap, const SplitDataset& dataset,
                               Split split, const RelationTrainConfig& config,
                               const RelationNetConfig& net_config,
                               const Normalization& norm = {},
                               const std::function<void(std::size_t, double)>& on_episode = {});

/// Precomputed per-image tap features for one (encoder, tap): avoids
/// re-encoding the same split images across a thousand episodes.
class FeatureTable {
public:
    FeatureTable() = default;
    /// Encodes every image in the split at the given taps (eval mode).
    FeatureTable(Encoder& encoder, const TapSpec& taps, const SplitDataset& dataset, Split split,
                 const Normalization& norm = {}, std::size_t batch = 64);

    /// Feature of image (class_idx, image_idx) at `tap`.
    const Tensor& get(std::size_t tap, std::size_t class_idx, std::size_t image_idx) const;

private:
    std::map<std::size_t, std::vector<std::vector<Tensor>>> features_; // tap -> class -> image
};

/// EpisodicClassifier over cached features; members reference taps in the table.
class RelationEnsembleClassifier : public EpisodicClassifier {
public:
    struct Member {
        std::size_t tap = 0;
        RelationNet* net = nullptr;
    };

    RelationEnsembleClassifier(const FeatureTable& table, std::vector<Member> members)
        : table_(table), members_(std::move(members)) {}

    std::vector<int> classify(const Episode& episode) override;
    /// Scores from the most recent classify() call.
    const ScoreMatrix& last_scores() const { return last_scores_; }

private:
    const FeatureTable& table_;
    std::vector<Member> members_;
    ScoreMatrix last_scores_;
};

} // namespace mlcl

#endif
