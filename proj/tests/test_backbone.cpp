#include <doctest.h>

#include <prol/backbone.hpp>
#include <prol/errors.hpp>
#include <prol/rng.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "grad_check.hpp"

using namespace prol;
namespace fs = std::filesystem;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

BackboneConfig tiny_config() {
    BackboneConfig c;
    c.layers = 2;
    c.heads = 2;
    c.dim = 8;
    c.patch_size = 2;
    c.image_side = 4;
    c.channels = 3;
    c.mlp_ratio = 2.0;
    return c;
}

Image random_image(const BackboneConfig& c, Rng& rng) {
    Image img(c.image_side, c.image_side, c.channels);
    for (double& v : img.pix) v = rng.uniform();
    return img;
}

fs::path tmp_file(const char* name) {
    fs::path dir = fs::temp_directory_path() / "prol_backbone_tests";
    fs::create_directories(dir);
    return dir / name;
}

// ---- independent forward oracle: plain loops over the checkpoint tensors ----

using Mat = std::vector<std::vector<double>>;

Mat matmul_o(const Mat& a, const Tensor& w) {
    Mat out(a.size(), std::vector<double>(w.cols(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < a[i].size(); ++k)
            for (std::size_t j = 0; j < w.cols(); ++j) out[i][j] += a[i][k] * w(k, j);
    return out;
}

void add_vec_o(Mat& a, const Tensor& b) {
    for (auto& row : a)
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
}

std::vector<double> layer_norm_row_o(const std::vector<double>& x, const Tensor& g, const Tensor& b) {
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= x.size();
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= x.size();
    double inv = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> out(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = g[j] * ((x[j] - mu) * inv) + b[j];
    return out;
}

struct OraclePrompt {
    // per layer, per head: l rows of head_dim for K and V
    std::vector<std::vector<Mat>> pk, pv;
    std::vector<int> layers;
};

struct OracleOut {
    std::vector<double> features;
    // attention output rows at layer 0 (post-softmax mix, pre-projection), per head
    std::vector<Mat> layer0_attn;
};

OracleOut oracle_forward(const BackboneCheckpoint& ckpt, const Image& img, const OraclePrompt* prompt) {
    const BackboneConfig& c = ckpt.config;
    int np = c.patch_count(), nt = c.token_count(), hd = c.head_dim();

    Mat patches(np, std::vector<double>(c.patch_dim()));
    int pps = c.patches_per_side();
    for (int py = 0; py < pps; ++py)
        for (int px = 0; px < pps; ++px) {
            auto& row = patches[py * pps + px];
            std::size_t k = 0;
            for (int y = 0; y < c.patch_size; ++y)
                for (int x = 0; x < c.patch_size; ++x)
                    for (int ch = 0; ch < c.channels; ++ch)
                        row[k++] = img.at(py * c.patch_size + y, px * c.patch_size + x, ch);
        }
    Mat embedded = matmul_o(patches, ckpt.params.at("patch/w"));
    add_vec_o(embedded, ckpt.params.at("patch/b"));

    Mat x(nt, std::vector<double>(c.dim));
    for (int j = 0; j < c.dim; ++j) x[0][j] = ckpt.params.at("cls")(0, j);
    for (int i = 0; i < np; ++i) x[i + 1] = embedded[i];
    const Tensor& pos = ckpt.params.at("pos");
    for (int i = 0; i < nt; ++i)
        for (int j = 0; j < c.dim; ++j) x[i][j] += pos(i, j);

    OracleOut out;
    for (int layer = 0; layer < c.layers; ++layer) {
        std::string p = "layer" + std::to_string(layer) + "/";
        Mat h(nt);
        for (int i = 0; i < nt; ++i)
            h[i] = layer_norm_row_o(x[i], ckpt.params.at(p + "ln1/g"), ckpt.params.at(p + "ln1/b"));
        Mat Q = matmul_o(h, ckpt.params.at(p + "wq"));
        add_vec_o(Q, ckpt.params.at(p + "bq"));
        Mat K = matmul_o(h, ckpt.params.at(p + "wk"));
        add_vec_o(K, ckpt.params.at(p + "bk"));
        Mat V = matmul_o(h, ckpt.params.at(p + "wv"));
        add_vec_o(V, ckpt.params.at(p + "bv"));

        int slot = -1;
        if (prompt) {
            auto it = std::find(prompt->layers.begin(), prompt->layers.end(), layer);
            if (it != prompt->layers.end()) slot = static_cast<int>(it - prompt->layers.begin());
        }

        Mat attn(nt, std::vector<double>(c.dim, 0.0));
        for (int head = 0; head < c.heads; ++head) {
            Mat kcat, vcat;
            if (slot >= 0) {
                kcat = prompt->pk[slot][head];
                vcat = prompt->pv[slot][head];
            }
            for (int i = 0; i < nt; ++i) {
                kcat.push_back(std::vector<double>(K[i].begin() + head * hd, K[i].begin() + (head + 1) * hd));
                vcat.push_back(std::vector<double>(V[i].begin() + head * hd, V[i].begin() + (head + 1) * hd));
            }
            Mat head_out(nt, std::vector<double>(hd, 0.0));
            for (int i = 0; i < nt; ++i) {
                std::vector<double> scores(kcat.size(), 0.0);
                for (std::size_t jj = 0; jj < kcat.size(); ++jj)
                    for (int d = 0; d < hd; ++d) scores[jj] += Q[i][head * hd + d] * kcat[jj][d];
                double m = *std::max_element(scores.begin(), scores.end());
                double z = 0.0;
                for (double& s : scores) {
                    s = std::exp(s / std::sqrt(double(hd)) - m / std::sqrt(double(hd)));
                    z += s;
                }
                for (double& s : scores) s /= z;
                for (std::size_t jj = 0; jj < kcat.size(); ++jj)
                    for (int d = 0; d < hd; ++d) head_out[i][d] += scores[jj] * vcat[jj][d];
            }
            if (layer == 0) out.layer0_attn.push_back(head_out);
            for (int i = 0; i < nt; ++i)
                for (int d = 0; d < hd; ++d) attn[i][head * hd + d] = head_out[i][d];
        }
        Mat proj = matmul_o(attn, ckpt.params.at(p + "wo"));
        add_vec_o(proj, ckpt.params.at(p + "bo"));
        for (int i = 0; i < nt; ++i)
            for (int j = 0; j < c.dim; ++j) x[i][j] += proj[i][j];

        Mat h2(nt);
        for (int i = 0; i < nt; ++i)
            h2[i] = layer_norm_row_o(x[i], ckpt.params.at(p + "ln2/g"), ckpt.params.at(p + "ln2/b"));
        Mat m1 = matmul_o(h2, ckpt.params.at(p + "mlp/w1"));
        add_vec_o(m1, ckpt.params.at(p + "mlp/b1"));
        for (auto& row : m1)
            for (double& v : row) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
        Mat m2 = matmul_o(m1, ckpt.params.at(p + "mlp/w2"));
        add_vec_o(m2, ckpt.params.at(p + "mlp/b2"));
        for (int i = 0; i < nt; ++i)
            for (int j = 0; j < c.dim; ++j) x[i][j] += m2[i][j];
    }
    out.features = layer_norm_row_o(x[0], ckpt.params.at("final_ln/g"), ckpt.params.at("final_ln/b"));
    return out;
}

}  // namespace

TEST_CASE("config validation catches bad shapes") {
    BackboneConfig c = tiny_config();
    c.dim = 65;
    c.heads = 4;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("divisible"), contract_error);
    c = tiny_config();
    c.image_side = 5;
    CHECK_THROWS_AS(c.validate(), contract_error);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("init is deterministic and matches the declared shape map") {
    BackboneCheckpoint a = init_backbone(tiny_config(), 5);
    BackboneCheckpoint b = init_backbone(tiny_config(), 5);
    CHECK(backbone_hash(a) == backbone_hash(b));
    auto shapes = backbone_param_shapes(tiny_config());
    CHECK(a.params.items.size() == shapes.size());
    for (const auto& [name, shape] : shapes) CHECK(a.params.at(name).shape == shape);
    BackboneCheckpoint c = init_backbone(tiny_config(), 6);
    CHECK(backbone_hash(a) != backbone_hash(c));
}

TEST_CASE("plain forward: zero image determinism and batch independence") {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 1);
    Image zero(4, 4, 3);
    Tensor f1 = forward_plain(ckpt, {&zero});
    Tensor f2 = forward_plain(ckpt, {&zero});
    CHECK(f1 == f2);
    CHECK(f1.all_finite());

    Rng rng(2);
    Image a = random_image(ckpt.config, rng);
    Tensor batch2 = forward_plain(ckpt, {&a, &a});
    for (std::size_t j = 0; j < batch2.cols(); ++j)
        CHECK(batch2(0, j) == batch2(1, j));  // identical inputs, identical rows
}

TEST_CASE("permuting the batch permutes the output rows identically") {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 3);
    Rng rng(4);
    std::vector<Image> imgs;
    for (int i = 0; i < 4; ++i) imgs.push_back(random_image(ckpt.config, rng));
    Tensor fwd = forward_plain(ckpt, {&imgs[0], &imgs[1], &imgs[2], &imgs[3]});
    Tensor per = forward_plain(ckpt, {&imgs[2], &imgs[0], &imgs[3], &imgs[1]});
    std::vector<int> perm = {2, 0, 3, 1};
    for (int r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < fwd.cols(); ++j) CHECK(per(r, j) == fwd(perm[r], j));
}

TEST_CASE("image shape mismatch is a contract error") {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 1);
    Image wrong(8, 8, 3);
    CHECK_THROWS_AS(forward_plain(ckpt, {&wrong}), contract_error);
}

TEST_CASE("forward matches the independent loop oracle (plain and prompted)") {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 11);
    Rng rng(12);
    Image img = random_image(ckpt.config, rng);

    OracleOut plain = oracle_forward(ckpt, img, nullptr);
    Tensor ours = forward_plain(ckpt, {&img});
    for (int j = 0; j < ckpt.config.dim; ++j)
        CHECK(ours(0, j) == doctest::Approx(plain.features[j]).epsilon(1e-10));

    // prompted: random prompt on layers {0, 1}, l = 2
    const int l = 2, hd = ckpt.config.head_dim();
    OraclePrompt op;
    op.layers = {0, 1};
    PrefixPrompt pp;
    pp.layers = {0, 1};
    for (int slot = 0; slot < 2; ++slot) {
        Tensor pk({(std::size_t)ckpt.config.heads, l, (std::size_t)hd});
        Tensor pv(pk.shape);
        for (double& v : pk.data) v = rng.normal();
        for (double& v : pv.data) v = rng.normal();
        std::vector<Mat> heads_k, heads_v;
        for (int h = 0; h < ckpt.config.heads; ++h) {
            Mat mk(l, std::vector<double>(hd)), mv(l, std::vector<double>(hd));
            for (int i = 0; i < l; ++i)
                for (int d = 0; d < hd; ++d) {
                    mk[i][d] = pk.data[(h * l + i) * hd + d];
                    mv[i][d] = pv.data[(h * l + i) * hd + d];
                }
            heads_k.push_back(mk);
            heads_v.push_back(mv);
        }
        op.pk.push_back(heads_k);
        op.pv.push_back(heads_v);
        pp.pk.push_back(Value::constant(pk));
        pp.pv.push_back(Value::constant(pv));
    }
    OracleOut prompted = oracle_forward(ckpt, img, &op);
    Tensor ours_p = forward_prompted(ckpt, {&img}, {pp});
    for (int j = 0; j < ckpt.config.dim; ++j)
        CHECK(ours_p(0, j) == doctest::Approx(prompted.features[j]).epsilon(1e-10));
}

TEST_CASE("zero-value prefix shrinks attention by the prefix mass (1-layer, 1-head, D=4)") {
    BackboneConfig c;
    c.layers = 1;
    c.heads = 1;
    c.dim = 4;
    c.patch_size = 2;
    c.image_side = 4;
    c.mlp_ratio = 2.0;
    BackboneCheckpoint ckpt = init_backbone(c, 21);
    Rng rng(22);
    Image img = random_image(c, rng);

    const int l = 3, hd = 4;
    OraclePrompt op;
    op.layers = {0};
    Mat pk_head(l, std::vector<double>(hd));
    for (auto& row : pk_head)
        for (double& v : row) v = rng.normal();
    Mat pv_head(l, std::vector<double>(hd, 0.0));  // all-zero values
    op.pk = {{pk_head}};
    op.pv = {{pv_head}};

    OracleOut plain = oracle_forward(ckpt, img, nullptr);
    OracleOut prompted = oracle_forward(ckpt, img, &op);

    // per query token: prompted head output = (1 - prefix mass) * plain output
    // (softmax over prefix+tokens reweighs token scores uniformly)
    REQUIRE(plain.layer0_attn.size() == 1);
    const Mat& po = plain.layer0_attn[0];
    const Mat& qo = prompted.layer0_attn[0];
    for (std::size_t i = 0; i < po.size(); ++i) {
        // recover the prefix mass from any nonzero component ratio
        double ratio = -1.0;
        for (int d = 0; d < hd; ++d)
            if (std::abs(po[i][d]) > 1e-9) {
                ratio = qo[i][d] / po[i][d];
                break;
            }
        REQUIRE(ratio >= 0.0);
        CHECK(ratio <= 1.0 + 1e-12);
        for (int d = 0; d < hd; ++d) CHECK(qo[i][d] == doctest::Approx(ratio * po[i][d]).epsilon(1e-9));
    }

    // and the real forward agrees with the oracle on this case
    Tensor pk({1, l, hd});
    for (int i = 0; i < l; ++i)
        for (int d = 0; d < hd; ++d) pk.data[i * hd + d] = pk_head[i][d];
    PrefixPrompt pp;
    pp.layers = {0};
    pp.pk = {Value::constant(pk)};
    pp.pv = {Value::constant(Tensor({1, l, hd}))};
    Tensor ours = forward_prompted(ckpt, {&img}, {pp});
    for (int j = 0; j < c.dim; ++j)
        CHECK(ours(0, j) == doctest::Approx(prompted.features[j]).epsilon(1e-10));
}

TEST_CASE("attention score shapes are n x (l + n) on injected layers and rows stay normalized") {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 7);
    Rng rng(8);
    Image img = random_image(ckpt.config, rng);
    const int l = 5, nt = ckpt.config.token_count();

    PrefixPrompt pp;
    pp.layers = {1};
    Tensor pk({(std::size_t)ckpt.config.heads, l, (std::size_t)ckpt.config.head_dim()});
    for (double& v : pk.data) v = rng.normal();
    pp.pk = {Value::constant(pk)};
    pp.pv = {Value::constant(pk)};

    ForwardTrace trace;
    forward_prompted(ckpt, {&img}, {pp}, &trace);
    REQUIRE_FALSE(trace.stats.empty());
    for (const auto& st : trace.stats) {
        CHECK(st.rows == (std::size_t)nt);
        CHECK(st.cols == (std::size_t)(st.layer == 1 ? l + nt : nt));
        CHECK(st.row_sum_min >= 1.0 - 1e-6);
        CHECK(st.row_sum_max <= 1.0 + 1e-6);
    }
}

TEST_CASE("no injected layers reproduces the plain forward bit for bit") {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 9);
    Rng rng(10);
    Image img = random_image(ckpt.config, rng);
    Tensor plain = forward_plain(ckpt, {&img});

    PrefixPrompt empty;  // no layers at all
    Tensor prompted = forward_prompted(ckpt, {&img}, {empty});
    CHECK(prompted == plain);
}

TEST_CASE("prompt validation catches bad layers and shapes") {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 1);
    Rng rng(2);
    Image img = random_image(ckpt.config, rng);
    PrefixPrompt pp;
    pp.layers = {7};  // beyond depth 2
    Tensor pk({(std::size_t)ckpt.config.heads, 2, (std::size_t)ckpt.config.head_dim()});
    pp.pk = {Value::constant(pk)};
    pp.pv = {Value::constant(pk)};
    CHECK_THROWS_AS(forward_prompted(ckpt, {&img}, {pp}), contract_error);
    CHECK_THROWS_AS(forward_prompted(ckpt, {&img, &img}, {pp}), contract_error);  // count mismatch
}

TEST_CASE("gradients of the prompted forward wrt prompts match finite differences") {
    BackboneConfig c;
    c.layers = 1;
    c.heads = 2;
    c.dim = 8;
    c.patch_size = 2;
    c.image_side = 4;
    BackboneCheckpoint ckpt = init_backbone(c, 31);
    Rng rng(32);
    Image img = random_image(c, rng);
    const std::size_t H = c.heads, l = 2, hd = c.head_dim();

    auto fn = [&](const std::vector<Value>& p) {
        PrefixPrompt pp;
        pp.layers = {0};
        pp.pk = {reshape(p[0], {H, l, hd})};
        pp.pv = {reshape(p[1], {H, l, hd})};
        BackboneValues bb = backbone_constants(ckpt);
        return mean_all(square(vit_forward(bb, {&img}, {pp}).features));
    };
    CHECK(grad_check(fn, {random_tensor({H * l * hd}, rng, 0.5), random_tensor({H * l * hd}, rng, 0.5)},
                     1e-5) < 1e-5);
}

TEST_CASE("checkpoint save/load round trip and error paths") {
    BackboneCheckpoint ckpt = init_backbone(tiny_config(), 13);
    ckpt.base_class_count = 4;
    auto path = tmp_file("bb.ckpt");
    save_checkpoint(ckpt, path);
    BackboneCheckpoint back = load_checkpoint(path);
    CHECK(back.config == ckpt.config);
    CHECK(back.base_class_count == 4);
    CHECK(backbone_hash(back) == backbone_hash(ckpt));
    for (const auto& [name, t] : ckpt.params.items) CHECK(back.params.at(name) == t);

    BackboneConfig other = tiny_config();
    other.layers = 3;
    CHECK_THROWS_WITH_AS(load_checkpoint(path, other), doctest::Contains("disagrees"), io_error);
    CHECK_NOTHROW(load_checkpoint(path, tiny_config()));

    // corrupt the magic
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(2);
        f.put('x');
    }
    CHECK_THROWS_AS(load_checkpoint(path), io_error);
}

TEST_CASE("pretraining: epochs=0 equals initialization, same seed twice is bit-identical") {
    BackboneConfig c = tiny_config();
    LabeledDataset base = make_synthetic(3, 6, c.image_side, 4.0, 17);
    PretrainOptions opts;
    opts.epochs = 0;
    opts.seed = 99;
    BackboneCheckpoint zero = pretrain_base(c, base, opts);
    CHECK(backbone_hash(zero) == backbone_hash(init_backbone(c, 99)));
    CHECK(zero.base_class_count == 3);

    opts.epochs = 2;
    opts.batch_size = 8;
    BackboneCheckpoint a = pretrain_base(c, base, opts);
    BackboneCheckpoint b = pretrain_base(c, base, opts);
    CHECK(backbone_hash(a) == backbone_hash(b));
    CHECK(backbone_hash(a) != backbone_hash(zero));
}

TEST_CASE("pretraining rejects overlapping base and continual classes") {
    BackboneConfig c = tiny_config();
    LabeledDataset base = make_synthetic(2, 3, c.image_side, 4.0, 1);
    PretrainOptions opts;
    opts.epochs = 0;
    CHECK_THROWS_AS(pretrain_base(c, base, opts, {0, 1}, {1, 2}), contract_error);
    CHECK_NOTHROW(pretrain_base(c, base, opts, {0, 1}, {2, 3}));
}

TEST_CASE("pretraining reaches 90% train accuracy on a 4-class synthetic base") {
    BackboneConfig c;  // the documented desk-scale config
    c.layers = 4;
    c.heads = 4;
    c.dim = 64;
    c.patch_size = 4;
    c.image_side = 16;
    LabeledDataset base = make_synthetic(4, 25, c.image_side, 3.0, 23);
    PretrainOptions opts;
    opts.epochs = 8;
    opts.lr = 1e-3;
    opts.batch_size = 16;
    opts.seed = 5;
    PretrainResult pr = pretrain_base_full(c, base, opts);
    CHECK(pr.final_train_accuracy >= 0.90);
}
