"""Distil a deep teacher into a compact student and compare their sizes.

    python demos/distill_student.py        # about 5 minutes

The KD loss is alpha*CE + (1-alpha)*T^2*KL with alpha = 0.1 and T = 3.
"""
from advleaf import data, eval as ev, nn, train

# noisy and small, so the student has room to improve
ds = data.split(data.generate_synthetic(data.SynthConfig(samples_per_class=60, noise=45.0)), seed=0)
x, y = ds.arrays("test")


def acc(m):
    return 100 * (m.predict(x) == y).mean()


cfg = train.TrainConfig(epochs=40, seed=0)
teacher, _ = train.train(nn.build_teacher(ds.class_count, ds.image_shape), ds, cfg)
scratch, _ = train.train(nn.build_student(ds.class_count, ds.image_shape), ds, cfg)
student, _ = train.distill(nn.build_student(ds.class_count, ds.image_shape), teacher, ds, cfg, train.KDConfig())

print(f"teacher {acc(teacher):.2f}%   student from scratch {acc(scratch):.2f}%   distilled {acc(student):.2f}%\n")

# teacher logits can also be shipped as a file and reused without the teacher
table = train.teacher_logit_table([teacher], ds)
train.export_teacher_logits(table, "teacher.altl")

report = ev.size_efficiency_report({"student": student, "teacher": teacher}, reference="student")
print(report.format_table())
