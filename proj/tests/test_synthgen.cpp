#include "sspslab/synthgen.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

using namespace sspslab;

namespace {

CorpusConfig small(Index s, Index r, Index u) {
  CorpusConfig c;
  c.n_speakers = s;
  c.recordings_per_speaker = r;
  c.utterances_per_recording = u;
  c.latent_dim = 3;
  c.input_dim = 5;
  return c;
}

template <class Get>
std::size_t distinct_rows(const Corpus& c, Get get) {
  std::set<std::vector<double>> seen;
  for (const auto& u : c.evaluation_labels()) {
    const RowVector& v = get(u);
    seen.insert(std::vector<double>(v.data(), v.data() + v.size()));
  }
  return seen.size();
}

}  // namespace

TEST(Corpus, CountsTwoSpeakers) {
  const Corpus c = build_corpus(small(2, 1, 1));
  EXPECT_EQ(c.size(), 2);
  EXPECT_EQ(distinct_rows(c, [](const UtteranceMeta& u) -> const RowVector& { return u.speaker_latent; }), 2u);
  EXPECT_EQ(distinct_rows(c, [](const UtteranceMeta& u) -> const RowVector& { return u.channel_latent; }), 2u);
}

TEST(Corpus, OneSpeakerThreeRecordings) {
  const Corpus c = build_corpus(small(1, 3, 2));
  EXPECT_EQ(c.size(), 6);
  EXPECT_EQ(distinct_rows(c, [](const UtteranceMeta& u) -> const RowVector& { return u.speaker_latent; }), 1u);
  EXPECT_EQ(distinct_rows(c, [](const UtteranceMeta& u) -> const RowVector& { return u.channel_latent; }), 3u);
}

TEST(Corpus, LatentSharingFollowsLabels) {
  const Corpus c = build_corpus(small(3, 3, 3));
  const auto& u = c.evaluation_labels();
  for (std::size_t i = 0; i < u.size(); ++i)
    for (std::size_t j = 0; j < u.size(); ++j) {
      EXPECT_EQ(u[i].speaker_id == u[j].speaker_id, u[i].speaker_latent == u[j].speaker_latent);
      EXPECT_EQ(u[i].recording_id == u[j].recording_id, u[i].channel_latent == u[j].channel_latent);
      EXPECT_EQ(u[i].utterance_id, static_cast<UttId>(i));
    }
}

TEST(Corpus, Deterministic) {
  const Corpus a = build_corpus(small(4, 2, 3));
  const Corpus b = build_corpus(small(4, 2, 3));
  EXPECT_EQ(a.speaker_mixing(), b.speaker_mixing());
  EXPECT_EQ(a.channel_mixing(), b.channel_mixing());
  EXPECT_EQ(a.clean_views(), b.clean_views());
  CorpusConfig other = small(4, 2, 3);
  other.seed = 8;
  EXPECT_NE(build_corpus(other).clean_views(), a.clean_views());
}

TEST(Corpus, RejectsBadConfig) {
  CorpusConfig c = small(0, 1, 1);
  EXPECT_THROW(build_corpus(c), Error);
  c = small(1, 1, 1);
  c.segment_noise_sigma = -0.1;
  EXPECT_THROW(build_corpus(c), Error);
  c = small(1, 1, 1);
  c.input_dim = 2;
  EXPECT_THROW(build_corpus(c), Error);
}

TEST(Corpus, MixingMatrixScale) {
  CorpusConfig c = small(1, 1, 1);
  c.latent_dim = 16;
  c.input_dim = 256;
  const Corpus corpus = build_corpus(c);
  // Entries ~ N(0, 1/latent_dim): sample variance of 4096 draws near 1/16.
  const Matrix& w = corpus.speaker_mixing();
  const double var = w.array().square().mean();
  EXPECT_NEAR(var, 1.0 / 16.0, 0.01);
}

TEST(Views, NoNoiseAnchorEqualsPositive) {
  CorpusConfig c = small(3, 2, 2);
  c.segment_noise_sigma = 0.0;
  c.augment_noise_sigma = 0.0;
  const Corpus corpus = build_corpus(c);
  Rng rng(1);
  const ViewBatch vb = sample_views(corpus, {0, 3, 7, 11}, ViewKind::pair, rng);
  EXPECT_EQ(vb.anchors, vb.positives);
  EXPECT_EQ(vb.anchors, vb.references);
}

TEST(Views, NoChannelSameSpeakerSameMean) {
  CorpusConfig c = small(2, 3, 2);
  c.channel_scale = 0.0;
  const Corpus corpus = build_corpus(c);
  // utterances 0 and 2 share speaker 0 but come from recordings 0 and 1
  EXPECT_NE(corpus.evaluation_labels()[0].recording_id, corpus.evaluation_labels()[2].recording_id);
  EXPECT_EQ(corpus.clean_view(0), corpus.clean_view(2));
}

TEST(Views, CleanViewMatchesMatrixProduct) {
  CorpusConfig c = small(2, 2, 2);
  c.channel_scale = 1.0;
  c.segment_noise_sigma = 0.0;
  c.augment_noise_sigma = 0.0;
  const Corpus corpus = build_corpus(c);
  const Matrix& ws = corpus.speaker_mixing();
  const Matrix& wr = corpus.channel_mixing();
  Rng rng(2);
  std::vector<UttId> ids(static_cast<std::size_t>(corpus.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<UttId>(i);
  const ViewBatch vb = sample_views(corpus, ids, ViewKind::pair, rng);
  for (const auto& u : corpus.evaluation_labels()) {
    for (Index d = 0; d < c.input_dim; ++d) {
      double expect = 0.0;
      for (Index k = 0; k < c.latent_dim; ++k)
        expect += ws(d, k) * u.speaker_latent(k) + wr(d, k) * u.channel_latent(k);
      EXPECT_NEAR(vb.anchors(u.utterance_id, d), expect, 1e-12);
    }
  }
}

TEST(Views, NoiseScales) {
  CorpusConfig c = small(1, 1, 1);
  c.input_dim = 50;
  c.segment_noise_sigma = 0.3;
  c.augment_noise_sigma = 0.4;
  const Corpus corpus = build_corpus(c);
  Rng rng(3);
  const std::vector<UttId> ids(400, 0);
  const ViewBatch vb = sample_views(corpus, ids, ViewKind::pair, rng);
  auto var_of = [&](const Matrix& m) {
    return (m.rowwise() - corpus.clean_view(0)).array().square().mean();
  };
  EXPECT_NEAR(var_of(vb.anchors), 0.09 + 0.16, 0.01);
  EXPECT_NEAR(var_of(vb.references), 0.045, 0.003);

  const ViewBatch mc = sample_views(corpus, ids, ViewKind::multicrop, rng);
  ASSERT_EQ(mc.global_views.size(), 2u);
  ASSERT_EQ(mc.local_views.size(), 4u);
  EXPECT_NEAR(var_of(mc.global_views[0]), 0.045 + 0.16, 0.01);
  EXPECT_NEAR(var_of(mc.local_views[3]), 0.09 + 0.16, 0.01);
  EXPECT_EQ(mc.teacher_views[1], mc.global_views[1]);
}

TEST(Views, PositiveSourcesRedirectPositive) {
  CorpusConfig c = small(2, 2, 2);
  c.segment_noise_sigma = 0.0;
  c.augment_noise_sigma = 0.0;
  const Corpus corpus = build_corpus(c);
  Rng rng(4);
  const ViewBatch vb = sample_views(corpus, {0, 1}, ViewKind::pair, rng, {5, 6});
  EXPECT_EQ(RowVector(vb.positives.row(0)), RowVector(corpus.clean_view(5)));
  EXPECT_EQ(RowVector(vb.references.row(1)), RowVector(corpus.clean_view(1)));
  const ViewBatch mc = sample_views(corpus, {0}, ViewKind::multicrop, rng, {5});
  EXPECT_EQ(RowVector(mc.teacher_views[0].row(0)), RowVector(corpus.clean_view(5)));
  EXPECT_EQ(RowVector(mc.global_views[0].row(0)), RowVector(corpus.clean_view(0)));
}

TEST(Views, UnknownIdRejected) {
  const Corpus corpus = build_corpus(small(1, 1, 2));
  Rng rng(5);
  EXPECT_THROW(sample_views(corpus, {2}, ViewKind::pair, rng), Error);
  EXPECT_THROW(sample_views(corpus, {-1}, ViewKind::multicrop, rng), Error);
}

TEST(Views, DeterministicGivenRngState) {
  const Corpus corpus = build_corpus(small(3, 2, 2));
  Rng a(9), b(9);
  EXPECT_EQ(sample_views(corpus, {1, 2, 3}, ViewKind::multicrop, a).local_views[2],
            sample_views(corpus, {1, 2, 3}, ViewKind::multicrop, b).local_views[2]);
}

TEST(Views, DominantChannelNearestNeighbourSharesRecording) {
  CorpusConfig c = small(6, 3, 3);
  c.latent_dim = 4;
  c.input_dim = 16;
  c.speaker_scale = 1.0;
  c.channel_scale = 20.0;
  const Corpus corpus = build_corpus(c);
  const Matrix x = normalize_rows(corpus.clean_views());
  const auto& labels = corpus.evaluation_labels();
  for (Index i = 0; i < x.rows(); ++i) {
    Index best = -1;
    double best_sim = -2.0;
    for (Index j = 0; j < x.rows(); ++j) {
      if (j == i) continue;
      const double s = x.row(i).dot(x.row(j));
      if (s > best_sim) {
        best_sim = s;
        best = j;
      }
    }
    EXPECT_EQ(labels[static_cast<std::size_t>(best)].recording_id,
              labels[static_cast<std::size_t>(i)].recording_id);
  }
}

TEST(EvalCorpus, DisjointSpeakersSharedMixing) {
  const Corpus train = build_corpus(small(4, 2, 2));
  const Corpus eval = build_eval_corpus(train, 3);
  EXPECT_EQ(eval.speaker_mixing(), train.speaker_mixing());
  std::set<Index> train_spk, eval_spk;
  for (const auto& u : train.evaluation_labels()) train_spk.insert(u.speaker_id);
  for (const auto& u : eval.evaluation_labels()) eval_spk.insert(u.speaker_id);
  EXPECT_EQ(eval_spk.size(), 3u);
  for (Index s : eval_spk) EXPECT_EQ(train_spk.count(s), 0u);
}

TEST(Trials, InfeasibleSingleSpeaker) {
  const Corpus eval = build_corpus(small(1, 2, 2));
  Rng rng(1);
  EXPECT_THROW(build_trials(eval, 0, 1, rng), Error);
  EXPECT_THROW(build_trials(eval, 7, 0, rng), Error);  // only 6 same-speaker pairs
}

TEST(Trials, ExactCountsAndLabelAudit) {
  const Corpus eval = build_corpus(small(4, 2, 3));
  Rng rng(2);
  const TrialList tl = build_trials(eval, 10, 10, rng);
  EXPECT_EQ(tl.size(), 20u);
  EXPECT_EQ(tl.n_target(), 10u);
  const auto& labels = eval.evaluation_labels();
  std::set<std::pair<UttId, UttId>> pairs;
  for (const auto& t : tl.trials) {
    EXPECT_NE(t.a, t.b);
    EXPECT_EQ(t.is_target, labels[static_cast<std::size_t>(t.a)].speaker_id ==
                               labels[static_cast<std::size_t>(t.b)].speaker_id);
    pairs.insert({std::min(t.a, t.b), std::max(t.a, t.b)});
  }
  EXPECT_EQ(pairs.size(), tl.size());
}

TEST(Trials, AllPairsWhenRequested) {
  const Corpus eval = build_corpus(small(2, 1, 3));
  Rng rng(3);
  const TrialList tl = build_trials(eval, 6, 9, rng);
  EXPECT_EQ(tl.n_target(), 6u);
  EXPECT_EQ(tl.size(), 15u);
}

TEST(Trials, TextRoundTrip) {
  const Corpus eval = build_corpus(small(3, 2, 2));
  Rng rng(4);
  const TrialList tl = build_trials(eval, 5, 7, rng);
  std::stringstream ss;
  write_trials(tl, ss);
  const std::string first = ss.str().substr(0, ss.str().find('\n'));
  EXPECT_TRUE(first[0] == '0' || first[0] == '1');
  EXPECT_EQ(read_trials(ss).trials, tl.trials);
}

TEST(Trials, MalformedLineRejected) {
  std::stringstream ss("1 0 1\n2 0 1\n");
  EXPECT_THROW(read_trials(ss), Error);
  std::stringstream extra("1 0 1 4\n");
  EXPECT_THROW(read_trials(extra), Error);
}

TEST(CorpusExport, RoundTrip) {
  CorpusConfig c = small(3, 2, 2);
  c.channel_scale = 1.25;
  const Corpus corpus = build_corpus(c);
  std::stringstream ss;
  export_corpus(corpus, ss);
  const Corpus back = import_corpus(ss);
  EXPECT_EQ(back.config(), c);
  EXPECT_EQ(back.clean_views(), corpus.clean_views());
}

TEST(CorpusExport, TamperedRowRejected) {
  const Corpus corpus = build_corpus(small(2, 1, 2));
  std::stringstream ss;
  export_corpus(corpus, ss);
  std::string text = ss.str();
  text.replace(text.rfind("3 1 1"), 5, "3 0 1");
  std::stringstream bad(text);
  EXPECT_THROW(import_corpus(bad), Error);
}

TEST(Corpus, SupervisionReadsCounted) {
  const Corpus corpus = build_corpus(small(2, 1, 1));
  (void)corpus.evaluation_labels();
  EXPECT_EQ(corpus.supervision_reads(), 0u);
  (void)corpus.supervision_labels();
  EXPECT_EQ(corpus.supervision_reads(), 1u);
}
