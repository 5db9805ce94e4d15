#include "score_net.hpp"

#include <cmath>

#include "errors.hpp"
#include "kernels.hpp"

namespace mvb {

namespace {

Tensor sinusoidal_embedding(int t, int dim) {
  const int half = dim / 2;
  Tensor e({dim});
  for (int i = 0; i < half; ++i) {
    const double freq =
        half > 1 ? std::exp(-std::log(10000.0) * static_cast<double>(i) / (half - 1)) : 1.0;
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Tensor y({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.data(), a.data() + a.size(), y.data());
  std::copy(b.data(), b.data() + b.size(), y.data() + a.size());
  return y;
}

void split_channels(const Tensor& dy, int c_first, Tensor& da, Tensor& db) {
  da = Tensor({c_first, dy.dim(1), dy.dim(2)});
  db = Tensor({dy.dim(0) - c_first, dy.dim(1), dy.dim(2)});
  std::copy(dy.data(), dy.data() + da.size(), da.data());
  std::copy(dy.data() + da.size(), dy.data() + dy.size(), db.data());
}

// Per-channel spatial sum; the adjoint of broadcasting the embedding
// projection over the feature map.
Tensor reduce_spatial(const Tensor& g) {
  const int c = g.dim(0);
  const int64_t plane = static_cast<int64_t>(g.dim(1)) * g.dim(2);
  Tensor out({c});
  for (int ch = 0; ch < c; ++ch) {
    const double* p = g.data() + static_cast<size_t>(ch) * plane;
    double acc = 0.0;
    for (int64_t i = 0; i < plane; ++i) acc += p[i];
    out[ch] = acc;
  }
  return out;
}

Tensor vstack(const std::vector<const Tensor*>& parts) {
  int total = 0;
  const int c = parts.empty() ? 0 : parts[0]->dim(1);
  for (const Tensor* t : parts) total += t->dim(0);
  Tensor out({total, c});
  double* dst = out.data();
  for (const Tensor* t : parts) {
    std::copy(t->data(), t->data() + t->size(), dst);
    dst += t->size();
  }
  return out;
}

struct ResLayers {
  GroupNorm gn1, gn2;
  Conv2d conv1, conv2;
  Linear emb_proj;
  Conv2d skip;
  bool has_skip = false;

  void init(const std::string& name, int cin, int cout, int emb_width, Rng& rng) {
    gn1.init(name + ".gn1", cin, rng);
    conv1.init(name + ".conv1", cin, cout, 3, 1, 1, rng);
    emb_proj.init(name + ".emb", emb_width, cout, rng);
    gn2.init(name + ".gn2", cout, rng);
    conv2.init(name + ".conv2", cout, cout, 3, 1, 1, rng, /*zero=*/true);
    has_skip = cin != cout;
    if (has_skip) skip.init(name + ".skip", cin, cout, 1, 1, 0, rng);
  }
  void collect(ParamRefs& refs) {
    gn1.collect(refs);
    conv1.collect(refs);
    emb_proj.collect(refs);
    gn2.collect(refs);
    conv2.collect(refs);
    if (has_skip) skip.collect(refs);
  }
};

struct ResTape {
  Tensor x;
  GroupNorm::Cache gn1c, gn2c;
  Tensor a1, s1;  // gn1 out, silu(a1)
  Tensor a2, s2;  // gn2 out, silu(a2)
};

struct AttnLayers {
  GroupNorm gn;
  Conv2d to_q, to_k, to_v, proj;
  Linear gk, gv;  // global-feature token projections (target branch only)
  int layer_index = -1;

  void init(const std::string& name, int channels, int global_width, Rng& rng) {
    gn.init(name + ".gn", channels, rng);
    to_q.init(name + ".q", channels, channels, 1, 1, 0, rng);
    to_k.init(name + ".k", channels, channels, 1, 1, 0, rng);
    to_v.init(name + ".v", channels, channels, 1, 1, 0, rng);
    proj.init(name + ".proj", channels, channels, 1, 1, 0, rng, /*zero=*/true);
    gk.init(name + ".gk", global_width, channels, rng);
    gv.init(name + ".gv", global_width, channels, rng);
  }
  void collect(ParamRefs& refs) {
    gn.collect(refs);
    to_q.collect(refs);
    to_k.collect(refs);
    to_v.collect(refs);
    proj.collect(refs);
    gk.collect(refs);
    gv.collect(refs);
  }
};

struct AttnTape {
  Tensor x;
  GroupNorm::Cache gnc;
  Tensor gn_out;
  Tensor q, k, v;           // own tokens [n,C]
  Tensor kcat, vcat;        // the K/V actually attended over
  Tensor attn;              // [n, n_total]
  Tensor attn_out;          // [n, C]
  Tensor g_tok_k, g_tok_v;  // global token rows (target mode)
  bool used_global = false;
  int n_cache_views = 0;
};

struct GlobalTape {
  Tensor x, a1, s1, a2, s2, a3, s3, pooled;
};

struct BranchTape {
  Tensor conv_in_x;
  std::vector<ResTape> res;
  std::vector<AttnTape> attn;
  std::vector<Tensor> down_in;
  std::vector<Tensor> up_in;
  GroupNorm::Cache out_gnc;
  Tensor out_a, out_s;
  // Embedding pieces.
  Tensor sin_emb, pose_in, label_in;
  Mlp2::Tape t_tape, pose_tape, label_tape;
  bool has_label = false;
  Tensor emb;
  Tensor silu_emb;
  Tensor d_silu_emb;  // accumulated during backward
};

struct BranchState {
  const Tensor* x = nullptr;
  Tensor h;
  std::vector<Tensor> skips;
  BranchTape* tape = nullptr;
};

enum class OpKind { kConvIn, kRes, kAttn, kSaveSkip, kDown, kUp, kConcat, kOutHead };

struct OpRef {
  OpKind kind;
  int index = 0;
  int level = 0;
};

}  // namespace

// ---------------------------------------------------------------------------

struct TrainingTape {
  std::vector<int> active_idx;
  std::vector<BranchTape> cond_tapes;
  std::vector<Tensor> cond_inputs;
  FeatureCache cache;
  bool null_condition = false;
  BranchTape target_tape;
  GlobalTape genc_tape;
  Tensor x_t;
  // Filled by the target backward, consumed by the condition backward.
  std::vector<std::vector<Tensor>> d_cache_k, d_cache_v;
  Tensor d_global;
};

void TrainingTapeDeleter::operator()(TrainingTape* t) const { delete t; }

// ---------------------------------------------------------------------------

bool NetworkConfig::has_attention(int level) const {
  for (int a : attention_levels) {
    if (a == level) return true;
  }
  return false;
}

void NetworkConfig::validate() const {
  if (base_channels < 1 || channel_mults.empty()) {
    throw ConfigError("NetworkConfig: need base_channels >= 1 and at least one level");
  }
  for (int a : attention_levels) {
    if (a < 0 || a >= levels()) {
      throw ConfigError("NetworkConfig: attention level " + std::to_string(a) + " does not exist");
    }
  }
  const int down_factor = 1 << (levels() - 1);
  if (resolution % down_factor != 0 || resolution < 2 * down_factor) {
    throw ConfigError("NetworkConfig: resolution not divisible by 2^(levels-1)");
  }
  if (time_embed_width % 2 != 0) throw ConfigError("NetworkConfig: time_embed_width must be even");
  if (n_max_condition_views < 1) throw ConfigError("NetworkConfig: need >= 1 condition view");
}

int ConditionSet::n_active() const {
  int n = 0;
  for (size_t i = 0; i < views.size(); ++i) {
    if (drop_mask.empty() || !drop_mask[i]) ++n;
  }
  return n;
}

void ConditionSet::validate() const {
  check_arg(!views.empty(), "ConditionSet: no views");
  check_arg(labels.size() == views.size(), "ConditionSet: labels/views size mismatch");
  check_arg(drop_mask.empty() || drop_mask.size() == views.size(),
            "ConditionSet: drop_mask size mismatch");
  check_arg(drop_mask.empty() || !drop_mask[0], "ConditionSet: canonical view cannot be dropped");
  check_arg(n_active() >= 1, "ConditionSet: at least one view must stay active");
  for (double l : labels) {
    check_arg(std::isfinite(l) && l >= 0.0 && l <= 1.0, "ConditionSet: label outside [0,1]");
  }
}

// ---------------------------------------------------------------------------

struct ScoreNet::Impl {
  NetworkConfig cfg;

  Mlp2 time_mlp, pose_mlp, label_mlp;
  Conv2d genc_c1, genc_c2, genc_c3;
  Linear genc_fc;

  Conv2d conv_in;
  std::vector<ResLayers> rb_down;
  std::vector<Conv2d> down_conv;
  ResLayers mid1, mid2;
  std::vector<Conv2d> up_conv;
  std::vector<ResLayers> rb_up;
  std::vector<AttnLayers> attn;
  GroupNorm out_gn;
  Conv2d out_conv;

  std::vector<OpRef> program;
  int last_attn_op = -1;

  ParamRefs params;
  Tensor global_feature_ref;  // live during backward for the gk/gv layers

  explicit Impl(const NetworkConfig& c, uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng = Rng(seed).derive(0x5c02e);
    const int L = cfg.levels();
    const int te = cfg.time_embed_width;

    time_mlp.init("time_mlp", te, te, te, rng);
    pose_mlp.init("pose_mlp", 12, te, te, rng, /*zero_last=*/true);
    label_mlp.init("label_mlp", 1, te, te, rng, /*zero_last=*/true);

    const int gb = cfg.base_channels;
    genc_c1.init("genc.c1", 3, gb, 3, 2, 1, rng);
    genc_c2.init("genc.c2", gb, gb * 2, 3, 2, 1, rng);
    genc_c3.init("genc.c3", gb * 2, gb * 4, 3, 2, 1, rng);
    genc_fc.init("genc.fc", gb * 4, cfg.global_feature_width, rng);

    conv_in.init("conv_in", 3, cfg.channels_at(0), 3, 1, 1, rng);

    auto add_attn = [&](const std::string& name, int channels) {
      AttnLayers a;
      a.init(name, channels, cfg.global_feature_width, rng);
      a.layer_index = static_cast<int>(attn.size());
      attn.push_back(std::move(a));
      return static_cast<int>(attn.size()) - 1;
    };

    rb_down.resize(static_cast<size_t>(L));
    rb_up.resize(static_cast<size_t>(L));
    if (L > 1) up_conv.resize(static_cast<size_t>(L - 1));

    program.push_back({OpKind::kConvIn});
    int prev_c = cfg.channels_at(0);
    for (int l = 0; l < L; ++l) {
      const int cl = cfg.channels_at(l);
      rb_down[static_cast<size_t>(l)].init("down" + std::to_string(l), prev_c, cl, te, rng);
      program.push_back({OpKind::kRes, l, l});
      if (cfg.has_attention(l)) {
        program.push_back({OpKind::kAttn, add_attn("attn_down" + std::to_string(l), cl), l});
      }
      program.push_back({OpKind::kSaveSkip, 0, l});
      if (l < L - 1) {
        Conv2d dc;
        dc.init("down_conv" + std::to_string(l), cl, cl, 3, 2, 1, rng);
        down_conv.push_back(std::move(dc));
        program.push_back({OpKind::kDown, static_cast<int>(down_conv.size()) - 1, l});
      }
      prev_c = cl;
    }

    const int cm = cfg.channels_at(L - 1);
    mid1.init("mid1", cm, cm, te, rng);
    program.push_back({OpKind::kRes, L, L - 1});
    program.push_back({OpKind::kAttn, add_attn("mid_attn", cm), L - 1});
    mid2.init("mid2", cm, cm, te, rng);
    program.push_back({OpKind::kRes, L + 1, L - 1});

    for (int l = L - 1; l >= 0; --l) {
      const int cl = cfg.channels_at(l);
      const int arriving = cfg.channels_at(std::min(l + 1, L - 1));
      if (l < L - 1) {
        up_conv[static_cast<size_t>(l)].init("up_conv" + std::to_string(l), arriving, arriving, 3,
                                             1, 1, rng);
        program.push_back({OpKind::kUp, l, l});
      }
      program.push_back({OpKind::kConcat, 0, l});
      rb_up[static_cast<size_t>(l)].init("up" + std::to_string(l), arriving + cl, cl, te, rng);
      program.push_back({OpKind::kRes, L + 2 + l, l});
      if (cfg.has_attention(l)) {
        program.push_back({OpKind::kAttn, add_attn("attn_up" + std::to_string(l), cl), l});
      }
    }

    out_gn.init("out_gn", cfg.channels_at(0), rng);
    out_conv.init("out_conv", cfg.channels_at(0), 3, 3, 1, 1, rng, /*zero=*/true);
    program.push_back({OpKind::kOutHead});

    for (size_t i = 0; i < program.size(); ++i) {
      if (program[i].kind == OpKind::kAttn) last_attn_op = static_cast<int>(i);
    }

    time_mlp.collect(params);
    pose_mlp.collect(params);
    label_mlp.collect(params);
    genc_c1.collect(params);
    genc_c2.collect(params);
    genc_c3.collect(params);
    genc_fc.collect(params);
    conv_in.collect(params);
    for (auto& r : rb_down) r.collect(params);
    for (auto& dc : down_conv) dc.collect(params);
    mid1.collect(params);
    mid2.collect(params);
    for (auto& uc : up_conv) uc.collect(params);
    for (auto& r : rb_up) r.collect(params);
    for (auto& a : attn) a.collect(params);
    out_gn.collect(params);
    out_conv.collect(params);

    ParamRefs pose_params;
    pose_mlp.collect(pose_params);
    for (Param* p : pose_params) p->pose_group = true;
  }

  ResLayers& res_by_index(int idx) {
    const int L = cfg.levels();
    if (idx < L) return rb_down[static_cast<size_t>(idx)];
    if (idx == L) return mid1;
    if (idx == L + 1) return mid2;
    return rb_up[static_cast<size_t>(idx - L - 2)];
  }

  // --- residual block ---------------------------------------------------
  Tensor res_forward(ResLayers& r, const Tensor& x, const Tensor& silu_emb, ResTape* tp) {
    GroupNorm::Cache gn1c;
    Tensor a1 = r.gn1.forward(x, tp ? &gn1c : nullptr);
    Tensor s1 = silu(a1);
    Tensor h = r.conv1.forward(s1);
    const Tensor emb_out = r.emb_proj.forward(silu_emb);
    const int64_t plane = static_cast<int64_t>(h.dim(1)) * h.dim(2);
    for (int ch = 0; ch < h.dim(0); ++ch) {
      double* p = h.data() + static_cast<size_t>(ch) * plane;
      for (int64_t i = 0; i < plane; ++i) p[i] += emb_out[ch];
    }
    GroupNorm::Cache gn2c;
    Tensor a2 = r.gn2.forward(h, tp ? &gn2c : nullptr);
    Tensor s2 = silu(a2);
    Tensor y = r.conv2.forward(s2);
    y.add_(r.has_skip ? r.skip.forward(x) : x);
    if (tp) {
      tp->x = x;
      tp->gn1c = std::move(gn1c);
      tp->gn2c = std::move(gn2c);
      tp->a1 = std::move(a1);
      tp->s1 = std::move(s1);
      tp->a2 = std::move(a2);
      tp->s2 = std::move(s2);
    }
    return y;
  }

  Tensor res_backward(ResLayers& r, const ResTape& tp, const Tensor& dy, const Tensor& silu_emb,
                      Tensor& d_silu_emb) {
    Tensor ds2;
    r.conv2.backward(tp.s2, dy, &ds2);
    Tensor da2 = silu_backward(tp.a2, ds2);
    Tensor dhpre = r.gn2.backward(tp.gn2c, da2);
    d_silu_emb.add_(r.emb_proj.backward(silu_emb, reduce_spatial(dhpre)));
    Tensor ds1;
    r.conv1.backward(tp.s1, dhpre, &ds1);
    Tensor da1 = silu_backward(tp.a1, ds1);
    Tensor dx = r.gn1.backward(tp.gn1c, da1);
    if (r.has_skip) {
      Tensor dskip_x;
      r.skip.backward(tp.x, dy, &dskip_x);
      dx.add_(dskip_x);
    } else {
      dx.add_(dy);
    }
    return dx;
  }

  // --- attention stage ----------------------------------------------------
  // Condition-group mode runs all branches jointly (keys/values concatenated
  // across views when cond_joint_attention). Target mode concatenates the
  // branch's own K/V with every cached view's K/V plus the global token.
  // At the final attention layer of a condition pass only the recorded K/V
  // matter, so the attention output itself is skipped.
  void attn_stage_forward(AttnLayers& a, std::vector<BranchState>& brs, bool joint,
                          const FeatureCache* use_cache, FeatureCache* record_cache,
                          bool record_tape, bool skip_output) {
    const int nb = static_cast<int>(brs.size());
    std::vector<AttnTape> local(static_cast<size_t>(nb));
    std::vector<Tensor> own_k(static_cast<size_t>(nb)), own_v(static_cast<size_t>(nb));
    for (int b = 0; b < nb; ++b) {
      BranchState& br = brs[static_cast<size_t>(b)];
      AttnTape& t = local[static_cast<size_t>(b)];
      t.x = br.h;
      Tensor gn_out = a.gn.forward(br.h, record_tape ? &t.gnc : nullptr);
      t.q = to_tokens(a.to_q.forward(gn_out));
      own_k[static_cast<size_t>(b)] = to_tokens(a.to_k.forward(gn_out));
      own_v[static_cast<size_t>(b)] = to_tokens(a.to_v.forward(gn_out));
      if (record_tape) t.gn_out = std::move(gn_out);
      if (record_cache) {
        record_cache->views[static_cast<size_t>(b)].k.push_back(own_k[static_cast<size_t>(b)]);
        record_cache->views[static_cast<size_t>(b)].v.push_back(own_v[static_cast<size_t>(b)]);
      }
    }

    for (int b = 0; b < nb; ++b) {
      BranchState& br = brs[static_cast<size_t>(b)];
      AttnTape& t = local[static_cast<size_t>(b)];
      t.k = own_k[static_cast<size_t>(b)];
      t.v = own_v[static_cast<size_t>(b)];

      if (!skip_output) {
        std::vector<const Tensor*> klist, vlist;
        if (joint) {
          for (int j = 0; j < nb; ++j) {
            klist.push_back(&own_k[static_cast<size_t>(j)]);
            vlist.push_back(&own_v[static_cast<size_t>(j)]);
          }
        } else {
          klist.push_back(&t.k);
          vlist.push_back(&t.v);
        }
        if (use_cache) {
          t.n_cache_views = static_cast<int>(use_cache->views.size());
          for (const auto& ve : use_cache->views) {
            ve.access_count++;
            klist.push_back(&ve.k[static_cast<size_t>(a.layer_index)]);
            vlist.push_back(&ve.v[static_cast<size_t>(a.layer_index)]);
          }
          if (use_cache->has_global) {
            const Tensor gk_row = a.gk.forward(use_cache->global_feature);
            const Tensor gv_row = a.gv.forward(use_cache->global_feature);
            t.g_tok_k = Tensor({1, gk_row.dim(0)});
            t.g_tok_v = Tensor({1, gv_row.dim(0)});
            std::copy(gk_row.data(), gk_row.data() + gk_row.size(), t.g_tok_k.data());
            std::copy(gv_row.data(), gv_row.data() + gv_row.size(), t.g_tok_v.data());
            klist.push_back(&t.g_tok_k);
            vlist.push_back(&t.g_tok_v);
            t.used_global = true;
          }
        }

        Tensor kcat = vstack(klist);
        Tensor vcat = vstack(vlist);
        const int nq = t.q.dim(0), nk = kcat.dim(0), d = t.q.dim(1);
        Tensor out({nq, d});
        Tensor attn_w({nq, nk});
        kernels::attention_forward(t.q.data(), nq, kcat.data(), vcat.data(), nk, d, out.data(),
                                   record_tape ? attn_w.data() : attn_w.data());
        Tensor proj_in = from_tokens(out, br.h.dim(1), br.h.dim(2));
        Tensor y = a.proj.forward(proj_in);
        y.add_(br.h);
        br.h = std::move(y);
        if (record_tape) {
          t.kcat = std::move(kcat);
          t.vcat = std::move(vcat);
          t.attn = std::move(attn_w);
          t.attn_out = std::move(out);
        }
      }
      if (record_tape) br.tape->attn.push_back(std::move(t));
    }
  }

  // d_h carries the gradient w.r.t. each branch's stage output. External
  // cache-token gradients for this layer arrive via ext_dk/ext_dv (condition
  // mode); target mode writes the gradients flowing into the cache segments
  // through d_cache_k/d_cache_v and the global feature through d_global.
  void attn_stage_backward(AttnLayers& a, std::vector<BranchState>& brs, std::vector<Tensor>& d_h,
                           bool joint, bool skipped_output,
                           std::vector<std::vector<Tensor>>* d_cache_k,
                           std::vector<std::vector<Tensor>>* d_cache_v, Tensor* d_global,
                           const std::vector<Tensor>* ext_dk, const std::vector<Tensor>* ext_dv) {
    const int nb = static_cast<int>(brs.size());
    std::vector<AttnTape*> tapes(static_cast<size_t>(nb));
    for (int b = 0; b < nb; ++b) {
      tapes[static_cast<size_t>(b)] = &brs[static_cast<size_t>(b)].tape->attn.back();
    }

    std::vector<Tensor> dq(static_cast<size_t>(nb)), dk(static_cast<size_t>(nb)),
        dv(static_cast<size_t>(nb));
    for (int b = 0; b < nb; ++b) {
      dq[static_cast<size_t>(b)] = Tensor(tapes[static_cast<size_t>(b)]->q.shape());
      dk[static_cast<size_t>(b)] = Tensor(tapes[static_cast<size_t>(b)]->k.shape());
      dv[static_cast<size_t>(b)] = Tensor(tapes[static_cast<size_t>(b)]->v.shape());
      if (ext_dk && !(*ext_dk)[static_cast<size_t>(b)].empty()) {
        dk[static_cast<size_t>(b)].add_((*ext_dk)[static_cast<size_t>(b)]);
        dv[static_cast<size_t>(b)].add_((*ext_dv)[static_cast<size_t>(b)]);
      }
    }

    if (!skipped_output) {
      const int n_tokens = tapes[0]->q.dim(0);
      const int d = tapes[0]->q.dim(1);
      Tensor dkcat_joint, dvcat_joint;
      if (joint) {
        dkcat_joint = Tensor(tapes[0]->kcat.shape());
        dvcat_joint = Tensor(tapes[0]->vcat.shape());
      }

      for (int b = 0; b < nb; ++b) {
        AttnTape& t = *tapes[static_cast<size_t>(b)];
        Tensor proj_in = from_tokens(t.attn_out, t.x.dim(1), t.x.dim(2));
        Tensor dproj_in;
        a.proj.backward(proj_in, d_h[static_cast<size_t>(b)], &dproj_in);
        Tensor dout = to_tokens(dproj_in);

        Tensor dkcat_local, dvcat_local;
        Tensor* dkc = &dkcat_joint;
        Tensor* dvc = &dvcat_joint;
        if (!joint) {
          dkcat_local = Tensor(t.kcat.shape());
          dvcat_local = Tensor(t.vcat.shape());
          dkc = &dkcat_local;
          dvc = &dvcat_local;
        }
        kernels::attention_backward(t.q.data(), t.q.dim(0), t.kcat.data(), t.vcat.data(),
                                    t.kcat.dim(0), d, t.attn.data(), dout.data(),
                                    dq[static_cast<size_t>(b)].data(), dkc->data(), dvc->data());

        if (!joint) {
          const double* kp = dkcat_local.data();
          const double* vp = dvcat_local.data();
          for (int64_t i = 0; i < static_cast<int64_t>(n_tokens) * d; ++i) {
            dk[static_cast<size_t>(b)][i] += kp[i];
            dv[static_cast<size_t>(b)][i] += vp[i];
          }
          int64_t off = static_cast<int64_t>(n_tokens) * d;
          for (int cv = 0; cv < t.n_cache_views; ++cv) {
            Tensor& dst_k =
                (*d_cache_k)[static_cast<size_t>(cv)][static_cast<size_t>(a.layer_index)];
            Tensor& dst_v =
                (*d_cache_v)[static_cast<size_t>(cv)][static_cast<size_t>(a.layer_index)];
            if (dst_k.empty()) {
              dst_k = Tensor({n_tokens, d});
              dst_v = Tensor({n_tokens, d});
            }
            for (int64_t i = 0; i < dst_k.size(); ++i) {
              dst_k[i] += kp[off + i];
              dst_v[i] += vp[off + i];
            }
            off += dst_k.size();
          }
          if (t.used_global && d_global) {
            Tensor dgk({d}), dgv({d});
            for (int i = 0; i < d; ++i) {
              dgk[i] = kp[off + i];
              dgv[i] = vp[off + i];
            }
            d_global->add_(a.gk.backward(global_feature_ref, dgk));
            d_global->add_(a.gv.backward(global_feature_ref, dgv));
          }
        }
      }

      if (joint) {
        int64_t off = 0;
        for (int b = 0; b < nb; ++b) {
          Tensor& dkb = dk[static_cast<size_t>(b)];
          Tensor& dvb = dv[static_cast<size_t>(b)];
          for (int64_t i = 0; i < dkb.size(); ++i) {
            dkb[i] += dkcat_joint[off + i];
            dvb[i] += dvcat_joint[off + i];
          }
          off += dkb.size();
        }
      }
    }

    for (int b = 0; b < nb; ++b) {
      BranchState& br = brs[static_cast<size_t>(b)];
      AttnTape& t = *tapes[static_cast<size_t>(b)];
      const int hh = t.x.dim(1), ww = t.x.dim(2);
      Tensor dgn(t.x.shape());
      Tensor tmp;
      a.to_q.backward(t.gn_out, from_tokens(dq[static_cast<size_t>(b)], hh, ww), &tmp);
      dgn.add_(tmp);
      a.to_k.backward(t.gn_out, from_tokens(dk[static_cast<size_t>(b)], hh, ww), &tmp);
      dgn.add_(tmp);
      a.to_v.backward(t.gn_out, from_tokens(dv[static_cast<size_t>(b)], hh, ww), &tmp);
      dgn.add_(tmp);
      Tensor dx = a.gn.backward(t.gnc, dgn);
      if (!skipped_output) dx.add_(d_h[static_cast<size_t>(b)]);  // residual path
      d_h[static_cast<size_t>(b)] = std::move(dx);
      br.tape->attn.pop_back();
    }
  }

  // --- trunk ---------------------------------------------------------------
  void trunk_forward(std::vector<BranchState>& brs, bool cond_mode, const FeatureCache* use_cache,
                     FeatureCache* record_cache, bool record_tape) {
    const bool joint = cond_mode && cfg.cond_joint_attention;
    const int stop_at = cond_mode ? last_attn_op : static_cast<int>(program.size()) - 1;
    for (int pi = 0; pi <= stop_at; ++pi) {
      const OpRef op = program[static_cast<size_t>(pi)];
      switch (op.kind) {
        case OpKind::kConvIn:
          for (BranchState& br : brs) {
            if (record_tape) br.tape->conv_in_x = *br.x;
            br.h = conv_in.forward(*br.x);
          }
          break;
        case OpKind::kRes: {
          ResLayers& r = res_by_index(op.index);
          for (BranchState& br : brs) {
            ResTape tp;
            br.h = res_forward(r, br.h, br.tape->silu_emb, record_tape ? &tp : nullptr);
            if (record_tape) br.tape->res.push_back(std::move(tp));
          }
          break;
        }
        case OpKind::kAttn:
          attn_stage_forward(attn[static_cast<size_t>(op.index)], brs, joint, use_cache,
                             record_cache, record_tape,
                             /*skip_output=*/cond_mode && pi == last_attn_op);
          break;
        case OpKind::kSaveSkip:
          for (BranchState& br : brs) br.skips.push_back(br.h);
          break;
        case OpKind::kDown:
          for (BranchState& br : brs) {
            if (record_tape) br.tape->down_in.push_back(br.h);
            br.h = down_conv[static_cast<size_t>(op.index)].forward(br.h);
          }
          break;
        case OpKind::kUp:
          for (BranchState& br : brs) {
            Tensor up = upsample_nearest2x(br.h);
            br.h = up_conv[static_cast<size_t>(op.index)].forward(up);
            if (record_tape) br.tape->up_in.push_back(std::move(up));
          }
          break;
        case OpKind::kConcat:
          for (BranchState& br : brs) {
            br.h = concat_channels(br.h, br.skips[static_cast<size_t>(op.level)]);
          }
          break;
        case OpKind::kOutHead:
          for (BranchState& br : brs) {
            GroupNorm::Cache gnc;
            Tensor a = out_gn.forward(br.h, record_tape ? &gnc : nullptr);
            Tensor s = silu(a);
            br.h = out_conv.forward(s);
            if (record_tape) {
              br.tape->out_gnc = std::move(gnc);
              br.tape->out_a = std::move(a);
              br.tape->out_s = std::move(s);
            }
          }
          break;
      }
    }
  }

  void trunk_backward(std::vector<BranchState>& brs, std::vector<Tensor>& d_h, bool cond_mode,
                      std::vector<std::vector<Tensor>>* d_cache_k,
                      std::vector<std::vector<Tensor>>* d_cache_v, Tensor* d_global,
                      const std::vector<std::vector<Tensor>>* ext_dk,
                      const std::vector<std::vector<Tensor>>* ext_dv) {
    const bool joint = cond_mode && cfg.cond_joint_attention;
    const int start = cond_mode ? last_attn_op : static_cast<int>(program.size()) - 1;
    std::vector<std::vector<Tensor>> d_skips(brs.size());
    for (auto& ds : d_skips) ds.resize(static_cast<size_t>(cfg.levels()));

    for (int pi = start; pi >= 0; --pi) {
      const OpRef op = program[static_cast<size_t>(pi)];
      switch (op.kind) {
        case OpKind::kConvIn:
          for (size_t b = 0; b < brs.size(); ++b) {
            conv_in.backward(brs[b].tape->conv_in_x, d_h[b], nullptr);
          }
          break;
        case OpKind::kRes: {
          ResLayers& r = res_by_index(op.index);
          for (size_t b = 0; b < brs.size(); ++b) {
            BranchTape& bt = *brs[b].tape;
            d_h[b] = res_backward(r, bt.res.back(), d_h[b], bt.silu_emb, bt.d_silu_emb);
            bt.res.pop_back();
          }
          break;
        }
        case OpKind::kAttn: {
          const bool skipped = cond_mode && pi == last_attn_op;
          std::vector<Tensor> edk, edv;
          const std::vector<Tensor>* edk_p = nullptr;
          const std::vector<Tensor>* edv_p = nullptr;
          if (ext_dk) {
            edk.resize(brs.size());
            edv.resize(brs.size());
            for (size_t b = 0; b < brs.size(); ++b) {
              edk[b] = (*ext_dk)[b][static_cast<size_t>(op.index)];
              edv[b] = (*ext_dv)[b][static_cast<size_t>(op.index)];
            }
            edk_p = &edk;
            edv_p = &edv;
          }
          attn_stage_backward(attn[static_cast<size_t>(op.index)], brs, d_h, joint, skipped,
                              d_cache_k, d_cache_v, d_global, edk_p, edv_p);
          break;
        }
        case OpKind::kSaveSkip:
          for (size_t b = 0; b < brs.size(); ++b) {
            if (!d_skips[b][static_cast<size_t>(op.level)].empty()) {
              d_h[b].add_(d_skips[b][static_cast<size_t>(op.level)]);
            }
          }
          break;
        case OpKind::kDown:
          for (size_t b = 0; b < brs.size(); ++b) {
            Tensor dx;
            down_conv[static_cast<size_t>(op.index)].backward(brs[b].tape->down_in.back(), d_h[b],
                                                              &dx);
            brs[b].tape->down_in.pop_back();
            d_h[b] = std::move(dx);
          }
          break;
        case OpKind::kUp:
          for (size_t b = 0; b < brs.size(); ++b) {
            Tensor dup;
            up_conv[static_cast<size_t>(op.index)].backward(brs[b].tape->up_in.back(), d_h[b],
                                                            &dup);
            brs[b].tape->up_in.pop_back();
            d_h[b] = upsample_nearest2x_backward(dup);
          }
          break;
        case OpKind::kConcat:
          for (size_t b = 0; b < brs.size(); ++b) {
            const int c_skip = cfg.channels_at(op.level);
            Tensor da, db;
            split_channels(d_h[b], d_h[b].dim(0) - c_skip, da, db);
            d_h[b] = std::move(da);
            d_skips[b][static_cast<size_t>(op.level)] = std::move(db);
          }
          break;
        case OpKind::kOutHead:
          for (size_t b = 0; b < brs.size(); ++b) {
            BranchTape& bt = *brs[b].tape;
            Tensor ds;
            out_conv.backward(bt.out_s, d_h[b], &ds);
            Tensor da = silu_backward(bt.out_a, ds);
            d_h[b] = out_gn.backward(bt.out_gnc, da);
          }
          break;
      }
    }
  }

  // --- embeddings ------------------------------------------------------
  Tensor branch_embedding(int t, const std::array<double, 12>& pv, std::optional<double> label,
                          BranchTape* tape) {
    Tensor sin_emb = sinusoidal_embedding(t, cfg.time_embed_width);
    Tensor pose_in({12});
    for (int i = 0; i < 12; ++i) pose_in[i] = pv[static_cast<size_t>(i)];
    Mlp2::Tape tt, pt, lt;
    Tensor emb = time_mlp.forward(sin_emb, tape ? &tt : nullptr);
    emb.add_(pose_mlp.forward(pose_in, tape ? &pt : nullptr));
    if (label.has_value()) {
      Tensor label_in({1});
      label_in[0] = *label;
      emb.add_(label_mlp.forward(label_in, tape ? &lt : nullptr));
      if (tape) {
        tape->label_in = std::move(label_in);
        tape->has_label = true;
      }
    }
    if (tape) {
      tape->sin_emb = std::move(sin_emb);
      tape->pose_in = std::move(pose_in);
      tape->t_tape = std::move(tt);
      tape->pose_tape = std::move(pt);
      if (tape->has_label) tape->label_tape = std::move(lt);
      tape->emb = emb;
      tape->silu_emb = silu(emb);
      tape->d_silu_emb = Tensor({cfg.time_embed_width});
    }
    return emb;
  }

  void embedding_backward(BranchTape& tape) {
    Tensor demb = silu_backward(tape.emb, tape.d_silu_emb);
    time_mlp.backward(tape.t_tape, demb);
    pose_mlp.backward(tape.pose_tape, demb);
    if (tape.has_label) label_mlp.backward(tape.label_tape, demb);
  }

  // --- global encoder ----------------------------------------------------
  Tensor global_forward(const Tensor& x, GlobalTape* tp) {
    Tensor a1 = genc_c1.forward(x);
    Tensor s1 = silu(a1);
    Tensor a2 = genc_c2.forward(s1);
    Tensor s2 = silu(a2);
    Tensor a3 = genc_c3.forward(s2);
    Tensor s3 = silu(a3);
    const int c = s3.dim(0);
    const int64_t plane = static_cast<int64_t>(s3.dim(1)) * s3.dim(2);
    Tensor pooled({c});
    for (int ch = 0; ch < c; ++ch) {
      const double* p = s3.data() + static_cast<size_t>(ch) * plane;
      double acc = 0.0;
      for (int64_t i = 0; i < plane; ++i) acc += p[i];
      pooled[ch] = acc / static_cast<double>(plane);
    }
    Tensor g = genc_fc.forward(pooled);
    if (tp) {
      tp->x = x;
      tp->a1 = std::move(a1);
      tp->s1 = std::move(s1);
      tp->a2 = std::move(a2);
      tp->s2 = std::move(s2);
      tp->a3 = std::move(a3);
      tp->s3 = std::move(s3);
      tp->pooled = std::move(pooled);
    }
    return g;
  }

  void global_backward(const GlobalTape& tp, const Tensor& dg) {
    Tensor dpooled = genc_fc.backward(tp.pooled, dg);
    const int c = tp.s3.dim(0);
    const int64_t plane = static_cast<int64_t>(tp.s3.dim(1)) * tp.s3.dim(2);
    Tensor ds3(tp.s3.shape());
    for (int ch = 0; ch < c; ++ch) {
      const double g = dpooled[ch] / static_cast<double>(plane);
      double* p = ds3.data() + static_cast<size_t>(ch) * plane;
      for (int64_t i = 0; i < plane; ++i) p[i] = g;
    }
    Tensor da3 = silu_backward(tp.a3, ds3);
    Tensor ds2;
    genc_c3.backward(tp.s2, da3, &ds2);
    Tensor da2 = silu_backward(tp.a2, ds2);
    Tensor ds1;
    genc_c2.backward(tp.s1, da2, &ds1);
    Tensor da1 = silu_backward(tp.a1, ds1);
    genc_c1.backward(tp.x, da1, nullptr);
  }
};

// ---------------------------------------------------------------------------

ScoreNet::ScoreNet(NetworkConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  impl_ = std::make_unique<Impl>(cfg_, seed);
  cfg_ = impl_->cfg;
  n_attn_layers_ = static_cast<int>(impl_->attn.size());
}

ScoreNet::~ScoreNet() = default;
ScoreNet::ScoreNet(ScoreNet&&) noexcept = default;
ScoreNet& ScoreNet::operator=(ScoreNet&&) noexcept = default;

int64_t ScoreNet::param_count() const {
  int64_t n = 0;
  for (const Param* p : impl_->params) n += p->value.size();
  return n;
}

uint64_t ScoreNet::params_checksum() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const Param* p : impl_->params) {
    h = fnv1a(p->value.data(), static_cast<size_t>(p->value.size()) * sizeof(double), h);
  }
  return h;
}

ParamRefs ScoreNet::parameters() { return impl_->params; }

Tensor ScoreNet::time_embedding(int t) const {
  return impl_->time_mlp.forward(sinusoidal_embedding(t, cfg_.time_embed_width));
}

Tensor ScoreNet::embed_pose_and_label(const std::array<double, 12>& pose_vec,
                                      std::optional<double> label, const Tensor& t_embed) const {
  if (label.has_value()) {
    check_arg(*label >= 0.0 && *label <= 1.0, "embed_pose_and_label: label outside [0,1]");
  }
  Tensor pose_in({12});
  for (int i = 0; i < 12; ++i) pose_in[i] = pose_vec[static_cast<size_t>(i)];
  Tensor emb = t_embed;
  emb.add_(impl_->pose_mlp.forward(pose_in));
  if (label.has_value()) {
    Tensor label_in({1});
    label_in[0] = *label;
    emb.add_(impl_->label_mlp.forward(label_in));
  }
  return emb;
}

Tensor ScoreNet::extract_global_feature(const ViewImage& view0) const {
  return impl_->global_forward(view0.rgb, nullptr);
}

FeatureCache ScoreNet::extract_local_features(const ConditionSet& cond,
                                              const std::vector<CameraPose>& poses) const {
  cond.validate();
  check_arg(poses.size() == cond.views.size(),
            "extract_local_features: pose/view count mismatch");
  check_arg(cond.n_views() <= cfg_.n_max_condition_views,
            "extract_local_features: too many condition views");

  FeatureCache cache;
  cache.global_feature = impl_->global_forward(cond.views[0].rgb, nullptr);
  cache.has_global = true;

  std::vector<int> active;
  for (int i = 0; i < cond.n_views(); ++i) {
    if (cond.drop_mask.empty() || !cond.drop_mask[static_cast<size_t>(i)]) active.push_back(i);
  }
  cache.views.resize(active.size());

  std::vector<BranchTape> tapes(active.size());
  std::vector<BranchState> brs(active.size());
  for (size_t b = 0; b < active.size(); ++b) {
    const int vi = active[b];
    impl_->branch_embedding(0, pose_vector(poses[static_cast<size_t>(vi)]),
                            cond.labels[static_cast<size_t>(vi)], &tapes[b]);
    brs[b].x = &cond.views[static_cast<size_t>(vi)].rgb;
    brs[b].tape = &tapes[b];
  }
  impl_->trunk_forward(brs, /*cond_mode=*/true, nullptr, &cache, /*record_tape=*/false);
  return cache;
}

Tensor ScoreNet::predict_noise(const Tensor& x_t, int t, const CameraPose& target_pose,
                               const FeatureCache& cache) const {
  check_arg(t >= 0, "predict_noise: negative timestep");
  for (const auto& ve : cache.views) {
    check_internal(static_cast<int>(ve.k.size()) == n_attn_layers_,
                   "predict_noise: cache layer count mismatch");
  }

  BranchTape tape;
  impl_->branch_embedding(t, pose_vector(target_pose), std::nullopt, &tape);
  std::vector<BranchState> brs(1);
  brs[0].x = &x_t;
  brs[0].tape = &tape;
  impl_->trunk_forward(brs, /*cond_mode=*/false, &cache, nullptr, /*record_tape=*/false);
  return std::move(brs[0].h);
}

Tensor ScoreNet::forward_training(const ConditionSet& cond, const std::vector<CameraPose>& poses,
                                  const Tensor& x_t, int t, const CameraPose& target_pose,
                                  bool null_condition, TrainingTapePtr& tape_out) const {
  cond.validate();
  check_arg(poses.size() == cond.views.size(), "forward_training: pose/view count mismatch");

  TrainingTapePtr tape(new TrainingTape());
  tape->null_condition = null_condition;

  if (!null_condition) {
    tape->cache.global_feature = impl_->global_forward(cond.views[0].rgb, &tape->genc_tape);
    tape->cache.has_global = true;

    for (int i = 0; i < cond.n_views(); ++i) {
      if (cond.drop_mask.empty() || !cond.drop_mask[static_cast<size_t>(i)]) {
        tape->active_idx.push_back(i);
      }
    }
    tape->cache.views.resize(tape->active_idx.size());
    tape->cond_tapes.resize(tape->active_idx.size());
    tape->cond_inputs.resize(tape->active_idx.size());

    std::vector<BranchState> brs(tape->active_idx.size());
    for (size_t b = 0; b < tape->active_idx.size(); ++b) {
      const int vi = tape->active_idx[b];
      tape->cond_inputs[b] = cond.views[static_cast<size_t>(vi)].rgb;
      impl_->branch_embedding(0, pose_vector(poses[static_cast<size_t>(vi)]),
                              cond.labels[static_cast<size_t>(vi)], &tape->cond_tapes[b]);
      brs[b].x = &tape->cond_inputs[b];
      brs[b].tape = &tape->cond_tapes[b];
    }
    impl_->trunk_forward(brs, /*cond_mode=*/true, nullptr, &tape->cache, /*record_tape=*/true);
  }

  tape->x_t = x_t;
  impl_->branch_embedding(t, pose_vector(target_pose), std::nullopt, &tape->target_tape);
  std::vector<BranchState> brs(1);
  brs[0].x = &tape->x_t;
  brs[0].tape = &tape->target_tape;
  impl_->trunk_forward(brs, /*cond_mode=*/false, &tape->cache, nullptr, /*record_tape=*/true);

  Tensor eps_hat = std::move(brs[0].h);
  tape_out = std::move(tape);
  return eps_hat;
}

void ScoreNet::backward(const Tensor& d_eps, TrainingTape& tape) {
  const size_t n_views = tape.cache.views.size();
  tape.d_cache_k.assign(n_views, std::vector<Tensor>(static_cast<size_t>(n_attn_layers_)));
  tape.d_cache_v.assign(n_views, std::vector<Tensor>(static_cast<size_t>(n_attn_layers_)));
  tape.d_global = Tensor({cfg_.global_feature_width});
  impl_->global_feature_ref = tape.cache.global_feature;

  {
    std::vector<BranchState> brs(1);
    brs[0].tape = &tape.target_tape;
    std::vector<Tensor> d_h(1);
    d_h[0] = d_eps;
    impl_->trunk_backward(brs, d_h, /*cond_mode=*/false, &tape.d_cache_k, &tape.d_cache_v,
                          &tape.d_global, nullptr, nullptr);
    impl_->embedding_backward(tape.target_tape);
  }

  if (!tape.null_condition) {
    std::vector<BranchState> brs(n_views);
    std::vector<Tensor> d_h(n_views);
    for (size_t b = 0; b < n_views; ++b) {
      brs[b].tape = &tape.cond_tapes[b];
      // The condition trunk stopped at the final attention layer whose own
      // output is unused, so the activation-gradient seed there is zero.
      d_h[b] = Tensor(tape.cond_tapes[b].attn.back().x.shape());
    }
    impl_->trunk_backward(brs, d_h, /*cond_mode=*/true, nullptr, nullptr, nullptr,
                          &tape.d_cache_k, &tape.d_cache_v);
    for (size_t b = 0; b < n_views; ++b) impl_->embedding_backward(tape.cond_tapes[b]);
    impl_->global_backward(tape.genc_tape, tape.d_global);
  }
  impl_->global_feature_ref = Tensor();
}

}  // namespace mvb
