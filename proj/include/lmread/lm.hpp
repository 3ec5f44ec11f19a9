#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "lmread/autodiff.hpp"
#include "lmread/common.hpp"
#include "lmread/corpus.hpp"
#include "lmread/rng.hpp"

namespace lmread {

enum class ModelKind { gru, transformer };

inline std::string kind_name(ModelKind k) { return k == ModelKind::gru ? "gru" : "tf"; }

inline ModelKind kind_from_name(const std::string& s) {
    if (s == "gru") return ModelKind::gru;
    if (s == "tf" || s == "transformer") return ModelKind::transformer;
    throw input_error("unknown model kind '" + s + "'");
}

struct ArchitectureSpec {
    ModelKind kind = ModelKind::gru;
    int layers = 1;
    int embed_dim = 400;
    int gru_hidden = 500;
    int gru_proj = 400;
    int heads = 8;
    int ffn_dim = 1024;
    int vocab_size = 0;  // V_total, specials included
    bool position_encoding = true;

    void validate() const {
        if (layers < 1) throw input_error("ArchitectureSpec: layers must be >= 1");
        if (vocab_size < Vocabulary::kSpecials + 1)
            throw input_error("ArchitectureSpec: vocab_size too small");
        if (embed_dim < 1 || gru_hidden < 1 || gru_proj < 1 || ffn_dim < 1 || heads < 1)
            throw input_error("ArchitectureSpec: dimensions must be positive");
        if (kind == ModelKind::transformer && embed_dim % heads != 0)
            throw input_error("ArchitectureSpec: embed_dim must be divisible by heads");
    }

    std::string type_label() const { return kind_name(kind) + std::to_string(layers); }
};

struct TensorShape {
    std::string name;
    Eigen::Index rows = 0, cols = 0;
    bool is_weight = false;  // weights get U(+-1/sqrt(fan_in)), biases zero
};

// Single source of truth for parameter names, shapes and initialization
// order. The embedding comes first so that models sharing a seed share its
// initial values bit for bit regardless of architecture.
inline std::vector<TensorShape> parameter_shapes(const ArchitectureSpec& s) {
    s.validate();
    std::vector<TensorShape> out;
    const Eigen::Index V = s.vocab_size, E = s.embed_dim, H = s.gru_hidden, P = s.gru_proj,
                       F = s.ffn_dim;
    out.push_back({"embed.W", V, E, false});
    if (s.kind == ModelKind::gru) {
        for (int l = 0; l < s.layers; ++l) {
            const Eigen::Index in = l == 0 ? E : H;
            const std::string p = "gru" + std::to_string(l) + ".";
            for (const char* g : {"r", "z", "n"})
                out.push_back({p + "W_i" + g, in, H, true});
            for (const char* g : {"r", "z", "n"})
                out.push_back({p + "W_h" + g, H, H, true});
            for (const char* g : {"r", "z", "n"})
                out.push_back({p + "b_i" + g, 1, H, false});
            for (const char* g : {"r", "z", "n"})
                out.push_back({p + "b_h" + g, 1, H, false});
        }
        out.push_back({"proj.W", H, P, true});
        out.push_back({"proj.b", 1, P, false});
        out.push_back({"out.W", P, V, true});
    } else {
        for (int l = 0; l < s.layers; ++l) {
            const std::string p = "tf" + std::to_string(l) + ".";
            for (const char* m : {"Wq", "Wk", "Wv", "Wo"})
                out.push_back({p + m, E, E, true});
            for (const char* m : {"bq", "bk", "bv", "bo"})
                out.push_back({p + m, 1, E, false});
            out.push_back({p + "ffn.W1", E, F, true});
            out.push_back({p + "ffn.b1", 1, F, false});
            out.push_back({p + "ffn.W2", F, E, true});
            out.push_back({p + "ffn.b2", 1, E, false});
        }
        out.push_back({"out.W", E, V, true});
    }
    out.push_back({"out.b", 1, V, false});
    return out;
}

inline std::int64_t count_parameters(const ArchitectureSpec& s) {
    std::int64_t n = 0;
    for (const auto& t : parameter_shapes(s)) n += static_cast<std::int64_t>(t.rows) * t.cols;
    return n;
}

struct ModelCheckpoint {
    ArchitectureSpec spec;
    std::vector<std::pair<std::string, Mat>> tensors;  // parameter_shapes() order
    std::uint64_t seed = 0;
    std::uint64_t sentences_seen = 0;
    std::string tag = "init";

    const Mat& tensor(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return m;
        throw input_error("checkpoint has no tensor '" + name + "'");
    }
    Mat& tensor(const std::string& name) {
        return const_cast<Mat&>(static_cast<const ModelCheckpoint*>(this)->tensor(name));
    }
};

// Deterministic initialization: embedding ~ U(-0.1, 0.1) drawn first, then
// weight matrices U(+-1/sqrt(fan_in)) and zero biases in declaration order.
inline ModelCheckpoint init_model(const ArchitectureSpec& spec, std::uint64_t seed) {
    ModelCheckpoint ckpt;
    ckpt.spec = spec;
    ckpt.seed = seed;
    Rng rng(mix_seed(seed, 0x1));
    for (const auto& ts : parameter_shapes(spec)) {
        Mat m(ts.rows, ts.cols);
        if (ts.name == "embed.W") {
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-0.1, 0.1);
        } else if (ts.is_weight) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(ts.rows));
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
        } else {
            m.setZero();
        }
        ckpt.tensors.emplace_back(ts.name, std::move(m));
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// forward graphs
// ---------------------------------------------------------------------------

// Leaf ids for every parameter tensor, recorded in tensor order (so that the
// leaf index equals the tensor index; grad_check relies on this).
inline std::vector<int> record_parameters(Tape& tape, const ModelCheckpoint& ckpt, bool needs_grad) {
    std::vector<int> ids;
    ids.reserve(ckpt.tensors.size());
    for (const auto& [name, m] : ckpt.tensors) ids.push_back(tape.leaf(m, needs_grad));
    return ids;
}

namespace detail {

inline int param_index(const ModelCheckpoint& ckpt, const std::string& name) {
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i)
        if (ckpt.tensors[i].first == name) return static_cast<int>(i);
    throw input_error("checkpoint has no tensor '" + name + "'");
}

// sin/cos position table, standard sinusoid frequencies
inline Mat sinusoid_rows(int t_len, int dim) {
    Mat pe(t_len, dim);
    for (int t = 0; t < t_len; ++t) {
        for (int j = 0; j < dim; j += 2) {
            const double freq = std::pow(10000.0, static_cast<double>(j) / dim);
            pe(t, j) = std::sin(t / freq);
            if (j + 1 < dim) pe(t, j + 1) = std::cos(t / freq);
        }
    }
    return pe;
}

constexpr double kMaskValue = -1e30;

inline Mat causal_mask(int t_len) {
    Mat m = Mat::Zero(t_len, t_len);
    for (int i = 0; i < t_len; ++i)
        for (int j = i + 1; j < t_len; ++j) m(i, j) = kMaskValue;
    return m;
}

// GRU stack over t_len steps, t-major rows (index t*batch + row).
// h' = (1-z) .* n + z .* h with the usual reset/update gates and separate
// input/hidden biases (the candidate's hidden bias sits inside the reset
// product).
inline int gru_stack(Tape& tape, const ModelCheckpoint& ckpt, const std::vector<int>& params,
                     int input, int batch, int t_len) {
    const auto& spec = ckpt.spec;
    int x = input;
    for (int l = 0; l < spec.layers; ++l) {
        const std::string p = "gru" + std::to_string(l) + ".";
        auto P = [&](const std::string& n) { return params[static_cast<std::size_t>(param_index(ckpt, p + n))]; };
        // input contributions for all steps at once
        const int xr = tape.add_row(tape.matmul(x, P("W_ir")), P("b_ir"));
        const int xz = tape.add_row(tape.matmul(x, P("W_iz")), P("b_iz"));
        const int xn = tape.add_row(tape.matmul(x, P("W_in")), P("b_in"));
        int h = tape.constant(Mat::Zero(batch, spec.gru_hidden));
        std::vector<int> steps;
        steps.reserve(static_cast<std::size_t>(t_len));
        for (int t = 0; t < t_len; ++t) {
            const int cols = static_cast<int>(tape.value(xr).cols());
            const int r = tape.sigmoid(tape.add(tape.slice(xr, t * batch, batch, 0, cols),
                                                tape.add_row(tape.matmul(h, P("W_hr")), P("b_hr"))));
            const int z = tape.sigmoid(tape.add(tape.slice(xz, t * batch, batch, 0, cols),
                                                tape.add_row(tape.matmul(h, P("W_hz")), P("b_hz"))));
            const int hn = tape.add_row(tape.matmul(h, P("W_hn")), P("b_hn"));
            const int n = tape.tanh(tape.add(tape.slice(xn, t * batch, batch, 0, cols), tape.mul(r, hn)));
            h = tape.add(n, tape.mul(z, tape.add(h, tape.scale(n, -1.0))));
            steps.push_back(h);
        }
        x = tape.concat_rows(steps);
    }
    return x;
}

// Transformer encoder stack with causal masking, b-major rows
// (index row*t_len + t). Post-norm residual blocks, layer norm without
// affine parameters.
inline int transformer_stack(Tape& tape, const ModelCheckpoint& ckpt, const std::vector<int>& params,
                             int input, int batch, int t_len) {
    const auto& spec = ckpt.spec;
    const int E = spec.embed_dim;
    const int dh = E / spec.heads;
    const Mat mask = causal_mask(t_len);
    int x = input;
    for (int l = 0; l < spec.layers; ++l) {
        const std::string p = "tf" + std::to_string(l) + ".";
        auto P = [&](const std::string& n) { return params[static_cast<std::size_t>(param_index(ckpt, p + n))]; };
        const int q = tape.add_row(tape.matmul(x, P("Wq")), P("bq"));
        const int k = tape.add_row(tape.matmul(x, P("Wk")), P("bk"));
        const int v = tape.add_row(tape.matmul(x, P("Wv")), P("bv"));
        std::vector<int> per_sentence;
        per_sentence.reserve(static_cast<std::size_t>(batch));
        for (int b = 0; b < batch; ++b) {
            const int qb = tape.slice(q, b * t_len, t_len, 0, E);
            const int kb = tape.slice(k, b * t_len, t_len, 0, E);
            const int vb = tape.slice(v, b * t_len, t_len, 0, E);
            std::vector<int> heads;
            heads.reserve(static_cast<std::size_t>(spec.heads));
            for (int hd = 0; hd < spec.heads; ++hd) {
                const int qh = tape.slice(qb, 0, t_len, hd * dh, dh);
                const int kh = tape.slice(kb, 0, t_len, hd * dh, dh);
                const int vh = tape.slice(vb, 0, t_len, hd * dh, dh);
                const int scores = tape.scale(tape.matmul(qh, tape.transpose(kh)),
                                              1.0 / std::sqrt(static_cast<double>(dh)));
                const int probs = tape.softmax_rows(tape.add_const(scores, mask));
                heads.push_back(tape.matmul(probs, vh));
            }
            per_sentence.push_back(tape.concat_cols(heads));
        }
        const int attn = tape.add_row(tape.matmul(tape.concat_rows(per_sentence), P("Wo")), P("bo"));
        x = tape.layer_norm_rows(tape.add(x, attn));
        const int ff = tape.add_row(
            tape.matmul(tape.relu(tape.add_row(tape.matmul(x, P("ffn.W1")), P("ffn.b1"))), P("ffn.W2")),
            P("ffn.b2"));
        x = tape.layer_norm_rows(tape.add(x, ff));
    }
    return x;
}

}  // namespace detail

// Next-token log-probabilities for a whole padded minibatch. Returns the
// log-softmax node over rows of flattened positions plus the row layout:
// row_of(b, t) gives the flat row holding log P(. | tokens[b][0..t]).
struct BatchLogProbs {
    int node = -1;
    int batch = 0;
    int t_len = 0;  // number of conditioning positions = T_max - 1
    bool t_major = false;
    int row_of(int b, int t) const { return t_major ? t * batch + b : b * t_len + t; }
};

inline BatchLogProbs batch_log_probs(Tape& tape, const ModelCheckpoint& ckpt,
                                     const std::vector<int>& params, const Minibatch& mb) {
    const auto& spec = ckpt.spec;
    const int B = static_cast<int>(mb.token_ids.rows());
    const int T_in = static_cast<int>(mb.token_ids.cols()) - 1;
    if (T_in < 1) throw input_error("batch_log_probs: need at least two positions");
    const bool t_major = spec.kind == ModelKind::gru;

    std::vector<int> flat(static_cast<std::size_t>(B) * T_in);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T_in; ++t) {
            int id = mb.token_ids(b, t);
            if (id == Minibatch::kPad) id = Vocabulary::kBos;  // masked out of the loss
            if (id < 0 || id >= spec.vocab_size)
                throw input_error("batch_log_probs: token id out of range");
            flat[static_cast<std::size_t>(t_major ? t * B + b : b * T_in + t)] = id;
        }
    }

    const int embed = params[0];
    int x = tape.gather_rows(embed, flat);
    int top;
    if (spec.kind == ModelKind::gru) {
        top = detail::gru_stack(tape, ckpt, params, x, B, T_in);
        const int pw = params[static_cast<std::size_t>(detail::param_index(ckpt, "proj.W"))];
        const int pb = params[static_cast<std::size_t>(detail::param_index(ckpt, "proj.b"))];
        top = tape.tanh(tape.add_row(tape.matmul(top, pw), pb));
    } else {
        x = tape.scale(x, std::sqrt(static_cast<double>(spec.embed_dim)));
        if (spec.position_encoding) {
            const Mat pe = detail::sinusoid_rows(T_in, spec.embed_dim);
            Mat full(static_cast<Eigen::Index>(B) * T_in, spec.embed_dim);
            for (int b = 0; b < B; ++b) full.middleRows(static_cast<Eigen::Index>(b) * T_in, T_in) = pe;
            x = tape.add_const(x, std::move(full));
        }
        top = detail::transformer_stack(tape, ckpt, params, x, B, T_in);
    }
    const int ow = params[static_cast<std::size_t>(detail::param_index(ckpt, "out.W"))];
    const int ob = params[static_cast<std::size_t>(detail::param_index(ckpt, "out.b"))];
    const int logits = tape.add_row(tape.matmul(top, ow), ob);

    BatchLogProbs out;
    out.node = tape.log_softmax_rows(logits);
    out.batch = B;
    out.t_len = T_in;
    out.t_major = t_major;
    return out;
}

// Mean masked cross-entropy per non-pad target token for the whole batch.
inline int lm_loss_graph(Tape& tape, const ModelCheckpoint& ckpt, const std::vector<int>& params,
                         const Minibatch& mb) {
    const BatchLogProbs lp = batch_log_probs(tape, ckpt, params, mb);
    std::vector<int> targets(static_cast<std::size_t>(lp.batch) * lp.t_len, 0);
    std::vector<unsigned char> mask(targets.size(), 0);
    for (int b = 0; b < lp.batch; ++b) {
        for (int t = 0; t < lp.t_len; ++t) {
            const std::size_t row = static_cast<std::size_t>(lp.row_of(b, t));
            if (mb.pad_mask(b, t + 1)) {
                targets[row] = mb.token_ids(b, t + 1);
                mask[row] = 1;
            }
        }
    }
    return tape.cross_entropy_logprobs(lp.node, std::move(targets), std::move(mask));
}

// Log-probability rows for one sequence that already carries BOS/EOS.
// Row t (0-based) is log P(. | tokens[0..t]); there are len-1 rows.
inline Mat forward_log_probs(const ModelCheckpoint& ckpt, const std::vector<int>& token_ids) {
    if (token_ids.size() < 2) throw input_error("forward_log_probs: sequence too short");
    for (int id : token_ids)
        if (id < 0 || id >= ckpt.spec.vocab_size)
            throw input_error("forward_log_probs: token id " + std::to_string(id) + " out of range");
    Minibatch mb;
    const int T = static_cast<int>(token_ids.size());
    mb.token_ids.resize(1, T);
    mb.pad_mask.setConstant(1, T, true);
    for (int t = 0; t < T; ++t) mb.token_ids(0, t) = token_ids[static_cast<std::size_t>(t)];
    mb.lengths = {T};

    Tape tape;
    const auto params = record_parameters(tape, ckpt, false);
    const BatchLogProbs lp = batch_log_probs(tape, ckpt, params, mb);
    return tape.value(lp.node);
}

// Per-word surprisal in nats for a sentence of vocabulary word ids (specials
// added internally): s_t = -log P(w_t | w_1..w_{t-1}) for every word plus EOS.
inline std::vector<double> surprisal_of(const ModelCheckpoint& ckpt, const std::vector<int>& sentence) {
    std::vector<int> seq;
    seq.reserve(sentence.size() + 2);
    seq.push_back(Vocabulary::kBos);
    for (int id : sentence) seq.push_back(id);
    seq.push_back(Vocabulary::kEos);
    const Mat logp = forward_log_probs(ckpt, seq);
    std::vector<double> out;
    out.reserve(sentence.size() + 1);
    for (std::size_t t = 1; t < seq.size(); ++t)
        out.push_back(-logp(static_cast<Eigen::Index>(t - 1), seq[t]));
    return out;
}

// ---------------------------------------------------------------------------
// checkpoint file format
// ---------------------------------------------------------------------------
// magic, format version, spec fields, seed, sentences_seen, tag, then named
// tensors: name length + name + dim count + dims + little-endian doubles.

namespace detail {

constexpr char kCkptMagic[8] = {'L', 'M', 'R', 'E', 'A', 'D', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

template <typename T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw input_error("truncated checkpoint: " + path);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw input_error("cannot write " + path.string());
    out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
    detail::put<std::uint32_t>(out, detail::kCkptVersion);
    const auto& s = ckpt.spec;
    detail::put<std::uint8_t>(out, s.kind == ModelKind::gru ? 0 : 1);
    detail::put<std::uint8_t>(out, s.position_encoding ? 1 : 0);
    for (int v : {s.layers, s.embed_dim, s.gru_hidden, s.gru_proj, s.heads, s.ffn_dim, s.vocab_size})
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
    detail::put<std::uint64_t>(out, ckpt.seed);
    detail::put<std::uint64_t>(out, ckpt.sentences_seen);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tag.size()));
    out.write(ckpt.tag.data(), static_cast<std::streamsize>(ckpt.tag.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, m] : ckpt.tensors) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put<std::uint32_t>(out, 2);
        detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        out.write(reinterpret_cast<const char*>(m.data()),
                  static_cast<std::streamsize>(sizeof(double)) * m.size());
    }
    if (!out) throw input_error("write failed: " + path.string());
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw input_error("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
        throw input_error("not a checkpoint file: " + path.string());
    const auto version = detail::get<std::uint32_t>(in, path.string());
    if (version != detail::kCkptVersion)
        throw input_error("unsupported checkpoint version in " + path.string());
    ModelCheckpoint ckpt;
    ckpt.spec.kind = detail::get<std::uint8_t>(in, path.string()) == 0 ? ModelKind::gru
                                                                       : ModelKind::transformer;
    ckpt.spec.position_encoding = detail::get<std::uint8_t>(in, path.string()) != 0;
    for (int* f : {&ckpt.spec.layers, &ckpt.spec.embed_dim, &ckpt.spec.gru_hidden,
                   &ckpt.spec.gru_proj, &ckpt.spec.heads, &ckpt.spec.ffn_dim, &ckpt.spec.vocab_size})
        *f = static_cast<int>(detail::get<std::uint32_t>(in, path.string()));
    ckpt.seed = detail::get<std::uint64_t>(in, path.string());
    ckpt.sentences_seen = detail::get<std::uint64_t>(in, path.string());
    const auto tag_len = detail::get<std::uint32_t>(in, path.string());
    ckpt.tag.resize(tag_len);
    in.read(ckpt.tag.data(), tag_len);
    const auto n_tensors = detail::get<std::uint32_t>(in, path.string());
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const auto name_len = detail::get<std::uint32_t>(in, path.string());
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto ndims = detail::get<std::uint32_t>(in, path.string());
        if (ndims != 2) throw input_error("unsupported tensor rank in " + path.string());
        const auto rows = detail::get<std::uint64_t>(in, path.string());
        const auto cols = detail::get<std::uint64_t>(in, path.string());
        Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        in.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(sizeof(double)) * m.size());
        if (!in) throw input_error("truncated checkpoint: " + path.string());
        ckpt.tensors.emplace_back(std::move(name), std::move(m));
    }
    // cross-check against the declared shapes
    const auto shapes = parameter_shapes(ckpt.spec);
    if (shapes.size() != ckpt.tensors.size())
        throw input_error("checkpoint tensor count mismatch in " + path.string());
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (shapes[i].name != ckpt.tensors[i].first || shapes[i].rows != ckpt.tensors[i].second.rows() ||
            shapes[i].cols != ckpt.tensors[i].second.cols())
            throw input_error("checkpoint tensor '" + ckpt.tensors[i].first +
                              "' does not match architecture in " + path.string());
    }
    return ckpt;
}

}  // namespace lmread
